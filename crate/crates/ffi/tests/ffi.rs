use std::ffi::{c_char, CString};
use std::path::Path;
use std::ptr;

use keycvae::data::SyntheticGrammar;
use keycvae::model::{Model, ModelConfig};
use keycvae_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { kc_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

fn cstrs(v: &[&str]) -> (Vec<CString>, Vec<*const c_char>) {
    let owned: Vec<CString> = v.iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs = owned.iter().map(|c| c.as_ptr()).collect();
    (owned, ptrs)
}

#[test]
fn pi_controller_matches_library() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { kc_pi_new(1.0, -0.01, -0.0001, 1, &mut h) }, KcStatus::Ok);
    let mut w = f64::NAN;
    assert_eq!(unsafe { kc_pi_update(h, 3.02, &mut w) }, KcStatus::Ok);
    assert!((w - 0.020402).abs() < 1e-15);
    assert!((unsafe { kc_pi_integral(h) } - 0.000202).abs() < 1e-15);
    assert_eq!(unsafe { kc_pi_update(h, 0.0, &mut w) }, KcStatus::Ok);
    assert_eq!(w, 0.0);
    assert_eq!(unsafe { kc_pi_update(h, -1.0, &mut w) }, KcStatus::InvalidArgument);
    assert!(last_error().contains("KL"));
    assert_eq!(unsafe { kc_pi_reset(h) }, KcStatus::Ok);
    assert_eq!(unsafe { kc_pi_integral(h) }, 0.0);
    unsafe { kc_pi_free(h) };

    assert_eq!(unsafe { kc_pi_new(1.0, 0.01, -0.0001, 1, &mut h) }, KcStatus::InvalidArgument);
    assert_eq!(unsafe { kc_pi_new(1.0, -0.01, -0.0001, 1, ptr::null_mut()) }, KcStatus::NullPointer);
    assert_eq!(unsafe { kc_pi_update(ptr::null_mut(), 1.0, &mut w) }, KcStatus::NullPointer);
    unsafe { kc_pi_free(ptr::null_mut()) };
}

#[test]
fn schedules() {
    assert_eq!(kc_cost_anneal_weight(100, 100.0, 10.0), 0.5);
    assert_eq!(kc_cyclical_anneal_weight(0, 100, 2, 0.5), 0.0);
    assert_eq!(kc_cyclical_anneal_weight(25, 100, 2, 0.5), 1.0);
    assert!(kc_cyclical_anneal_weight(25, 100, 0, 0.5).is_nan());
}

#[test]
fn text_metrics() {
    let mut v = 0.0;
    let a = CString::new("a b c d").unwrap();
    let b = CString::new("a c d e").unwrap();
    assert_eq!(unsafe { kc_rouge_l(a.as_ptr(), b.as_ptr(), &mut v) }, KcStatus::Ok);
    assert!((v - 0.75).abs() < 1e-12);

    let cand = CString::new("a a a").unwrap();
    let (_o, refs) = cstrs(&["a b"]);
    assert_eq!(unsafe { kc_bleu(cand.as_ptr(), refs.as_ptr(), 1, 1, &mut v) }, KcStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(unsafe { kc_bleu(cand.as_ptr(), refs.as_ptr(), 0, 1, &mut v) }, KcStatus::InvalidArgument);

    let (_o, same) = cstrs(&["x y z", "x y z", "x y z"]);
    assert_eq!(unsafe { kc_self_bleu(same.as_ptr(), 3, 3, &mut v) }, KcStatus::Ok);
    assert!((v - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { kc_self_bleu(same.as_ptr(), 1, 3, &mut v) }, KcStatus::InvalidArgument);

    let (_o, ab) = cstrs(&["a b", "a b"]);
    let mut n = 0usize;
    assert_eq!(unsafe { kc_dis_n(ab.as_ptr(), 2, 1, &mut n) }, KcStatus::Ok);
    assert_eq!(n, 2);
    assert_eq!(unsafe { kc_dis_n(ab.as_ptr(), 2, 2, &mut n) }, KcStatus::Ok);
    assert_eq!(n, 1);
    assert_eq!(unsafe { kc_dis_n(ptr::null(), 0, 1, &mut n) }, KcStatus::Ok);
    assert_eq!(n, 0);
    assert_eq!(unsafe { kc_dis_n(ab.as_ptr(), 2, 0, &mut n) }, KcStatus::InvalidArgument);

    let zero = [0.0];
    let one = [1.0];
    assert_eq!(
        unsafe { kc_gaussian_kl(one.as_ptr(), zero.as_ptr(), zero.as_ptr(), zero.as_ptr(), 1, &mut v) },
        KcStatus::Ok
    );
    assert!((v - 0.5).abs() < 1e-15);
    assert_eq!(
        unsafe { kc_gaussian_kl(ptr::null(), zero.as_ptr(), zero.as_ptr(), zero.as_ptr(), 1, &mut v) },
        KcStatus::NullPointer
    );
}

#[test]
fn model_handle_generates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let vocab = SyntheticGrammar::default().vocabulary();
    let model = Model::new(ModelConfig::tiny(vocab.len()), 1).unwrap();
    keycvae::trainer::save_model(&path, &model, &vocab).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { kc_model_load(cpath.as_ptr(), &mut h) }, KcStatus::Ok);
    assert_eq!(unsafe { kc_model_vocab_size(h) }, vocab.len());

    let spec = CString::new("coat:1 wool:2").unwrap();
    let mut needed = 0usize;
    let status = unsafe { kc_model_generate(h, spec.as_ptr(), 3, 0.0, 8, ptr::null_mut(), 0, &mut needed) };
    assert_eq!(status, KcStatus::BufferTooSmall);
    let mut buf = vec![0u8; needed + 1];
    let status = unsafe { kc_model_generate(h, spec.as_ptr(), 3, 0.0, 8, buf.as_mut_ptr().cast(), buf.len(), &mut needed) };
    assert_eq!(status, KcStatus::Ok);
    let first = String::from_utf8(buf[..needed].to_vec()).unwrap();
    assert!(first.split_whitespace().count() <= 8);
    let mut again = vec![0u8; needed + 1];
    unsafe { kc_model_generate(h, spec.as_ptr(), 3, 0.0, 8, again.as_mut_ptr().cast(), again.len(), &mut needed) };
    assert_eq!(buf, again);

    let bad = CString::new("coat=1").unwrap();
    let status = unsafe { kc_model_generate(h, bad.as_ptr(), 3, 0.0, 8, buf.as_mut_ptr().cast(), buf.len(), &mut needed) };
    assert_eq!(status, KcStatus::Parse);
    unsafe { kc_model_free(h) };

    let missing = CString::new("/nonexistent/m.ckpt").unwrap();
    assert_eq!(unsafe { kc_model_load(missing.as_ptr(), &mut h) }, KcStatus::Checkpoint);
    assert!(!last_error().is_empty());
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/keycvae.h")).unwrap();
    for f in [
        "kc_last_error_message",
        "kc_pi_new",
        "kc_pi_update",
        "kc_pi_free",
        "kc_model_load",
        "kc_model_generate",
        "kc_model_free",
        "kc_rouge_l",
        "kc_bleu",
        "kc_self_bleu",
        "kc_dis_n",
        "kc_gaussian_kl",
        "KC_STATUS_BUFFER_TOO_SMALL",
        "typedef struct KcModel KcModel",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
