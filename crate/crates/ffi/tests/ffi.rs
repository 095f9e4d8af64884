use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tempfile::TempDir;
use tisv::checkpoint::save_network;
use tisv::data::{generate_synthetic, SynthSpec};
use tisv::network::{build_network, SeNetConfig};
use tisv::trainer::{pretrain_speaker_softmax, PretrainConfig};
use tisv_ffi::*;

fn write_checkpoint(dir: &Path) -> (PathBuf, SeNetConfig) {
    let cfg = SeNetConfig { input_len: 256, ..SeNetConfig::tiny() };
    let (net, mut store) = build_network(&cfg, 4).unwrap();
    // One short epoch fills the batch-norm statistics that inference needs.
    let spec = SynthSpec { n_speakers: 3, n_keywords: 1, utts_per_pair: 4, segment_len: 256, ..SynthSpec::default() };
    let (ds, _) = generate_synthetic(&spec).unwrap();
    pretrain_speaker_softmax(&net, &mut store, &ds, &PretrainConfig { epochs: 1, batch_size: 6, ..PretrainConfig::default() }).unwrap();
    let path = dir.join("net.ckpt");
    save_network(&path, &store, &cfg, "abc").unwrap();
    (path, cfg)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(tisv_last_error()) }.to_str().unwrap().to_string()
}

fn wave(n: usize, f: f64) -> Vec<f64> {
    (0..n).map(|i| 0.3 * (f * i as f64).sin()).collect()
}

#[test]
fn embed_enroll_score_round_trip() {
    let dir = TempDir::new().unwrap();
    let (path, cfg) = write_checkpoint(dir.path());
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(tisv_embedder_load(c_path.as_ptr(), &mut e), TisvStatus::Ok);
        let d = tisv_embedder_dim(e);
        assert_eq!(d, cfg.embed_dim);
        assert_eq!(tisv_embedder_input_len(e), 256);

        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        let wa = wave(256, 0.05);
        assert_eq!(tisv_embed(e, wa.as_ptr(), wa.len(), a.as_mut_ptr(), d), TisvStatus::Ok, "{}", last_error());
        assert_eq!(tisv_embed(e, wa.as_ptr(), wa.len(), a.as_mut_ptr(), d - 1), TisvStatus::Config);
        // Longer input is center-cropped to the same window.
        let mut padded = vec![9.0; 10];
        padded.extend(&wa);
        padded.extend(vec![9.0; 10]);
        assert_eq!(tisv_embed(e, padded.as_ptr(), padded.len(), b.as_mut_ptr(), d), TisvStatus::Ok);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);

        let wb = wave(200, 0.21);
        assert_eq!(tisv_embed(e, wb.as_ptr(), wb.len(), b.as_mut_ptr(), d), TisvStatus::Ok);

        let mut m = ptr::null_mut();
        let rows: Vec<f64> = a.iter().chain(&b).copied().collect();
        assert_eq!(tisv_enroll(rows.as_ptr(), 2, d, &mut m), TisvStatus::Ok);
        let centroid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let want = centroid.iter().zip(&a).map(|(c, x)| c * x).sum::<f64>()
            / centroid.iter().map(|c| c * c).sum::<f64>().sqrt();
        let mut s = 0.0;
        assert_eq!(tisv_score(m, a.as_ptr(), d, &mut s), TisvStatus::Ok);
        assert!((s - want).abs() < 1e-12, "{s} vs {want}");

        let mut accept = -1;
        assert_eq!(tisv_decide(s, s, &mut accept), TisvStatus::Ok);
        assert_eq!(accept, 0, "acceptance is strict");
        assert_eq!(tisv_decide(s, -1.0, &mut accept), TisvStatus::Ok);
        assert_eq!(accept, 1);

        tisv_model_free(m);
        tisv_embedder_free(e);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let mut e = ptr::null_mut();
        let missing = CString::new("/nonexistent/net.ckpt").unwrap();
        assert_eq!(tisv_embedder_load(missing.as_ptr(), &mut e), TisvStatus::Data);
        assert!(e.is_null());
        assert!(last_error().contains("nonexistent"));
        assert_eq!(tisv_embedder_load(ptr::null(), &mut e), TisvStatus::NullArgument);
        assert_eq!(tisv_embedder_dim(ptr::null()), 0);

        let mut accept = 0;
        assert_eq!(tisv_decide(0.5, 1.5, &mut accept), TisvStatus::Config);
        assert_eq!(tisv_decide(0.5, 0.1, ptr::null_mut()), TisvStatus::NullArgument);

        let mut m = ptr::null_mut();
        assert_eq!(tisv_enroll(ptr::null(), 0, 4, &mut m), TisvStatus::Config);
        assert!(m.is_null());
        let x = [0.0, 0.0];
        assert_eq!(tisv_enroll(x.as_ptr(), 1, 2, &mut m), TisvStatus::Ok);
        let mut s = 0.0;
        assert_ne!(tisv_score(m, x.as_ptr(), 2, &mut s), TisvStatus::Ok, "zero centroid has no direction");
        tisv_model_free(m);

        tisv_embedder_free(ptr::null_mut());
        tisv_model_free(ptr::null_mut());
    }
}

#[test]
fn eer_matches_the_library() {
    let t = [0.9, 0.4, 0.7, 0.2];
    let i = [0.1, 0.5, 0.3];
    let want = tisv::verification::compute_eer(&t, &i).unwrap();
    let (mut eer, mut tau) = (0.0, 0.0);
    unsafe {
        assert_eq!(tisv_compute_eer(t.as_ptr(), t.len(), i.as_ptr(), i.len(), &mut eer, &mut tau), TisvStatus::Ok);
        assert_eq!((eer, tau), (want.eer, want.threshold));
        assert_eq!(tisv_compute_eer(t.as_ptr(), t.len(), i.as_ptr(), 0, &mut eer, &mut tau), TisvStatus::Config);
    }
}

/// The generated header compiles and links against the static library.
#[test]
fn c_program_links_against_the_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib_dir = deps.parent().unwrap();
    assert!(lib_dir.join("libtisv_ffi.a").exists(), "no static library in {}", lib_dir.display());
    let dir = TempDir::new().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(lib_dir.join("libtisv_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cc runs");
    assert!(status.success());
    let (ckpt, _) = write_checkpoint(dir.path());
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("ok 1.0000"));
}
