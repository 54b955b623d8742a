use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nrdiff::dataset::{generate_scenes, Split};
use nrdiff::denoiser::{save_checkpoint, Architecture};
use nrdiff::semantics::SceneParams;
use nrdiff::{DenoiserConfig, DenoiserModel};
use nrdiff_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        nrd_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn tiny_model(dir: &Path) -> PathBuf {
    let config = DenoiserConfig {
        architecture: Architecture::PixelMlp,
        height: 16,
        width: 16,
        steps: 10,
        ..DenoiserConfig::default()
    };
    let path = dir.join("model.dgn");
    save_checkpoint(&DenoiserModel::new(config, 1).unwrap(), &path).unwrap();
    path
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

struct Handles {
    model: *mut NrdModel,
    bank: *mut NrdBank,
    schedule: *mut NrdSchedule,
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            nrd_model_free(self.model);
            nrd_bank_free(self.bank);
            nrd_schedule_free(self.schedule);
        }
    }
}

fn open(dir: &Path) -> Handles {
    let path = cpath(&tiny_model(dir));
    let mut h = Handles {
        model: ptr::null_mut(),
        bank: ptr::null_mut(),
        schedule: ptr::null_mut(),
    };
    unsafe {
        assert_eq!(nrd_model_load(path.as_ptr(), &mut h.model), NrdStatus::Ok);
        assert_eq!(nrd_model_schedule(h.model, &mut h.schedule), NrdStatus::Ok);
        assert_eq!(nrd_bank_build(7, 16, 3, 16, 16, &mut h.bank), NrdStatus::Ok);
    }
    h
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(nrd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn tx_rx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let h = open(dir.path());
    let params = SceneParams {
        height: 16,
        width: 16,
        ..SceneParams::default()
    };
    let scene = generate_scenes(3, Split::Test, 1, &params).unwrap().remove(0);
    let image = scene.image.data();

    let mut need = 0usize;
    let mut index = usize::MAX;
    let status = unsafe {
        nrd_tx(
            h.bank, h.schedule, ptr::null(), image.as_ptr(), image.len(), scene.labels.as_ptr(),
            scene.labels.len(), 0, 0.25, ptr::null_mut(), 0, &mut need, &mut index,
        )
    };
    assert_eq!(status, NrdStatus::BufferTooSmall);
    assert!(need > 0);

    let mut packet = vec![0u8; need];
    let mut len = 0usize;
    let status = unsafe {
        nrd_tx(
            h.bank, h.schedule, ptr::null(), image.as_ptr(), image.len(), scene.labels.as_ptr(),
            scene.labels.len(), 0, 0.25, packet.as_mut_ptr(), packet.len(), &mut len, &mut index,
        )
    };
    assert_eq!(status, NrdStatus::Ok, "{}", last_error());
    assert_eq!(len, need);

    let mut selected = 0usize;
    let status = unsafe { nrd_select_noise(h.bank, h.schedule, image.as_ptr(), image.len(), &mut selected) };
    assert_eq!(status, NrdStatus::Ok);
    assert_eq!(selected, index);

    let (mut decoded, mut n) = (0usize, 0usize);
    assert_eq!(
        unsafe { nrd_packet_decode(packet.as_ptr(), len, ptr::null(), &mut decoded, &mut n) },
        NrdStatus::Ok
    );
    assert_eq!((decoded, n), (index, 16));

    let mut out = vec![0.0f64; image.len()];
    let mut written = 0usize;
    let mut rx_index = 0usize;
    let status = unsafe {
        nrd_rx(
            h.model, h.bank, ptr::null(), packet.as_ptr(), len, 5, out.as_mut_ptr(), out.len(),
            &mut written, &mut rx_index,
        )
    };
    assert_eq!(status, NrdStatus::Ok, "{}", last_error());
    assert_eq!(written, image.len());
    assert_eq!(rx_index, index);
    assert!(out.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
}

#[test]
fn errors_map_to_codes_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut bank: *mut NrdBank = ptr::null_mut();
    unsafe {
        assert_eq!(nrd_bank_build(1, 0, 3, 4, 4, &mut bank), NrdStatus::InvalidConfig);
        assert!(last_error().contains("at least 1"), "{}", last_error());
        assert!(bank.is_null());

        assert_eq!(nrd_bank_build(1, 4, 1, 2, 2, ptr::null_mut()), NrdStatus::NullArgument);

        let missing = cpath(&dir.path().join("missing.nbk"));
        assert_eq!(nrd_bank_load(missing.as_ptr(), &mut bank), NrdStatus::Io);

        let junk = dir.path().join("junk.dgn");
        std::fs::write(&junk, b"not a model").unwrap();
        let mut model: *mut NrdModel = ptr::null_mut();
        assert_eq!(nrd_model_load(cpath(&junk).as_ptr(), &mut model), NrdStatus::Format);
        assert!(model.is_null());

        let mut idx = 0usize;
        let zeros = [0u8; 4];
        assert_eq!(
            nrd_packet_decode(zeros.as_ptr(), zeros.len(), ptr::null(), &mut idx, ptr::null_mut()),
            NrdStatus::PacketLost
        );
        let bad = NrdCodec {
            strong_repeat: 4,
            weak_repeat: 1,
            run_length: false,
        };
        assert_eq!(
            nrd_packet_decode(zeros.as_ptr(), zeros.len(), &bad, &mut idx, ptr::null_mut()),
            NrdStatus::InvalidConfig
        );

        let mut s: *mut NrdSchedule = ptr::null_mut();
        assert_eq!(nrd_schedule_new(10, 1e-3, 0.2, &mut s), NrdStatus::Ok);
        let mut ab = 0.0;
        assert_eq!(nrd_schedule_alpha_bar(s, 0, &mut ab), NrdStatus::OutOfRange);
        assert_eq!(nrd_schedule_alpha_bar(s, 10, &mut ab), NrdStatus::Ok);
        assert!(ab > 0.0 && ab < 1.0);
        assert!(last_error().is_empty());
        nrd_schedule_free(s);

        // Freeing null is a no-op.
        nrd_bank_free(ptr::null_mut());
        nrd_model_free(ptr::null_mut());
    }
}

#[test]
fn bank_save_and_load_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut bank: *mut NrdBank = ptr::null_mut();
    unsafe {
        assert_eq!(nrd_bank_build(9, 5, 1, 3, 3, &mut bank), NrdStatus::Ok);
        for full in [false, true] {
            let path = cpath(&dir.path().join(format!("b{full}.nbk")));
            assert_eq!(nrd_bank_save(bank, path.as_ptr(), full), NrdStatus::Ok);
            let mut back: *mut NrdBank = ptr::null_mut();
            assert_eq!(nrd_bank_load(path.as_ptr(), &mut back), NrdStatus::Ok);
            let mut n = 0usize;
            assert_eq!(nrd_bank_len(back, &mut n), NrdStatus::Ok);
            assert_eq!(n, 5);
            for i in 0..5 {
                let (mut a, mut b) = ([0f32; 9], [0f32; 9]);
                let mut len = 0usize;
                assert_eq!(nrd_bank_vector(bank, i, a.as_mut_ptr(), 9, &mut len), NrdStatus::Ok);
                assert_eq!(nrd_bank_vector(back, i, b.as_mut_ptr(), 9, &mut len), NrdStatus::Ok);
                assert_eq!(a, b);
            }
            let mut len = 0usize;
            assert_eq!(nrd_bank_vector(back, 5, ptr::null_mut(), 0, &mut len), NrdStatus::OutOfRange);
            nrd_bank_free(back);
        }
        nrd_bank_free(bank);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/nrdiff.h");
    for name in [
        "nrd_version", "nrd_last_error", "nrd_codec_default", "nrd_schedule_new", "nrd_schedule_alpha_bar",
        "nrd_schedule_free", "nrd_bank_build", "nrd_bank_load", "nrd_bank_save", "nrd_bank_len",
        "nrd_bank_vector", "nrd_bank_free", "nrd_select_noise", "nrd_tx", "nrd_packet_decode",
        "nrd_model_load", "nrd_model_shape", "nrd_model_schedule", "nrd_model_free", "nrd_rx",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct NrdBank NrdBank;"));
}

/// Directory holding the built shared library, next to this test binary.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let lib = lib_dir();
    if !lib.join("libnrdiff_ffi.so").exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or shared library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-L")
        .arg(&lib)
        .arg("-lnrdiff_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let model = tiny_model(dir.path());
    let out = Command::new(&exe)
        .arg(&model)
        .env("LD_LIBRARY_PATH", &lib)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
