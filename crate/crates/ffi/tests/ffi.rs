use std::ffi::{CStr, CString};
use std::ptr;

use palu_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(palu_last_error()) }.to_string_lossy().into_owned()
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> *mut PaluMatrix {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { palu_matrix_new(rows, cols, data.as_ptr(), &mut m) }, PaluStatus::Ok);
    m
}

fn contents(m: *const PaluMatrix) -> Vec<f64> {
    let n = unsafe { palu_matrix_rows(m) * palu_matrix_cols(m) };
    let mut buf = vec![0.0; n];
    let mut len = 0;
    assert_eq!(unsafe { palu_matrix_copy(m, buf.as_mut_ptr(), n, &mut len) }, PaluStatus::Ok);
    assert_eq!(len, n);
    buf
}

#[test]
fn matrix_round_trip_and_errors() {
    let m = matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    unsafe {
        assert_eq!((palu_matrix_rows(m), palu_matrix_cols(m)), (2, 3));
        assert_eq!(contents(m), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let mut small = [0.0; 2];
        let mut len = 0;
        assert_eq!(palu_matrix_copy(m, small.as_mut_ptr(), 2, &mut len), PaluStatus::Validation);
        assert_eq!(len, 6);
        assert!(last_error().contains("need 6"));
        palu_matrix_free(m);

        let mut out = ptr::null_mut();
        assert_eq!(palu_matrix_new(2, 2, ptr::null(), &mut out), PaluStatus::Null);
        assert!(out.is_null());
        assert_eq!(palu_matrix_new(usize::MAX, 2, [0.0].as_ptr(), &mut out), PaluStatus::Validation);
        assert_eq!(palu_matrix_rows(ptr::null()), 0);
        palu_matrix_free(ptr::null_mut());

        let nan = matrix(1, 1, &[f64::NAN]);
        let mut sv = [0.0; 1];
        assert_eq!(palu_svd_singular_values(nan, sv.as_mut_ptr(), 1, &mut len), PaluStatus::Numerical);
        palu_matrix_free(nan);
    }
    assert!(!last_error().is_empty());
}

#[test]
fn spectrum_and_truncation() {
    unsafe {
        let mut w = ptr::null_mut();
        assert_eq!(palu_matrix_random(16, 16, 3, 0.5, &mut w), PaluStatus::Ok);
        let mut sv = [0.0; 16];
        let mut len = 0;
        assert_eq!(palu_svd_singular_values(w, sv.as_mut_ptr(), 16, &mut len), PaluStatus::Ok);
        for (i, s) in sv.iter().enumerate() {
            assert!((s - 0.5f64.powi(i as i32)).abs() < 1e-10);
        }

        let mut d = ptr::null_mut();
        let ranks = [4usize];
        let st = palu_decompose(w, 4, 4, PaluGranularity::JointHead, 0, ranks.as_ptr(), 1, &mut d);
        assert_eq!(st, PaluStatus::Ok, "{}", last_error());
        let mut err = 0.0;
        assert_eq!(palu_frobenius_error(d, w, &mut err), PaluStatus::Ok);
        let expect = (4..16).map(|i| 0.25f64.powi(i)).sum::<f64>().sqrt();
        assert!((err - expect).abs() < 1e-10);

        let mut rotated = ptr::null_mut();
        assert_eq!(palu_fuse_hadamard(d, &mut rotated), PaluStatus::Ok);
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(palu_reconstruct(d, &mut a), PaluStatus::Ok);
        assert_eq!(palu_reconstruct(rotated, &mut b), PaluStatus::Ok);
        for (x, y) in contents(a).iter().zip(contents(b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut r = [0usize; 1];
        assert_eq!(palu_decomposed_ranks(rotated, r.as_mut_ptr(), 1, &mut len), PaluStatus::Ok);
        assert_eq!(r, [4]);

        let bad = [4usize, 4];
        let mut d2 = ptr::null_mut();
        let st = palu_decompose(w, 4, 4, PaluGranularity::GroupHead, 3, bad.as_ptr(), 2, &mut d2);
        assert_eq!(st, PaluStatus::Validation);
        assert!(d2.is_null());

        for p in [a, b, w] {
            palu_matrix_free(p);
        }
        palu_decomposed_free(d);
        palu_decomposed_free(rotated);
    }
}

#[test]
fn quantize_round_trip() {
    let m = matrix(2, 4, &[0.0, 1.0, 2.0, 3.0, -1.0, -0.5, 0.5, 1.0]);
    unsafe {
        let mut q = ptr::null_mut();
        assert_eq!(palu_quantize(m, 5, &mut q), PaluStatus::Validation);
        assert_eq!(palu_quantize(m, 2, &mut q), PaluStatus::Ok);
        let mut codes = [0u8; 8];
        let mut len = 0;
        assert_eq!(palu_quantized_codes(q, codes.as_mut_ptr(), 8, &mut len), PaluStatus::Ok);
        assert_eq!(&codes[..4], &[0, 1, 2, 3]);
        let mut scales = [0.0; 2];
        assert_eq!(palu_quantized_scales(q, scales.as_mut_ptr(), 2, &mut len), PaluStatus::Ok);
        assert!((scales[0] - 1.0).abs() < 1e-15);
        let mut back = ptr::null_mut();
        assert_eq!(palu_dequantize(q, &mut back), PaluStatus::Ok);
        assert_eq!(&contents(back)[..4], &[0.0, 1.0, 2.0, 3.0]);
        palu_matrix_free(back);
        palu_quantized_free(q);
        palu_matrix_free(m);
    }
}

#[test]
fn accounting_and_allocation() {
    assert!((palu_weight_ratio(4096.0, 512.0, 358.4) - 0.7875).abs() < 1e-12);
    let name = CString::new("llama2-7b").unwrap();
    let (mut base, mut comp) = (0u64, 0u64);
    unsafe {
        assert_eq!(palu_kv_cache_bytes(name.as_ptr(), 131072, 4, 0.5, 3, &mut base, &mut comp), PaluStatus::Ok);
        assert_eq!(base, 64 << 30);
        assert_eq!(comp, 6 << 30);
        let bad = CString::new("gpt-9").unwrap();
        assert_eq!(palu_kv_cache_bytes(bad.as_ptr(), 1, 4, 0.5, 3, &mut base, &mut comp), PaluStatus::Validation);
        assert!(last_error().contains("gpt-9"));
        assert_eq!(palu_kv_cache_bytes(ptr::null(), 1, 4, 0.5, 3, &mut base, &mut comp), PaluStatus::Null);

        let mut ranks = [0usize; 2];
        let st = palu_allocate([3.0, 1.0].as_ptr(), [8, 8].as_ptr(), 2, 64, 0.5, 1, 0, ranks.as_mut_ptr());
        assert_eq!(st, PaluStatus::Ok);
        assert_eq!(ranks, [6, 2]);
        let st = palu_allocate([3.0, 1.0].as_ptr(), [8, 8].as_ptr(), 2, 64, 0.0, 1, 0, ranks.as_mut_ptr());
        assert_eq!(st, PaluStatus::Validation);
    }
    let v = unsafe { CStr::from_ptr(palu_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/palu.h")).unwrap();
    for name in [
        "palu_matrix_new",
        "palu_decompose",
        "palu_quantize",
        "palu_allocate",
        "palu_last_error",
        "typedef struct PaluMatrix PaluMatrix",
        "PALU_STATUS_PANIC = 6",
    ] {
        assert!(header.contains(name), "{name}");
    }
    for (compiler, ext) in [("cc", "c"), ("c++", "cpp")] {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join(format!("probe.{ext}"));
        std::fs::write(
            &src,
            "#include \"palu.h\"\nint probe(void) { PaluMatrix *m = 0; return (int)palu_matrix_rows(m) + PALU_STATUS_OK; }\n",
        )
        .unwrap();
        let status = std::process::Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Wextra", "-Werror", "-I"])
            .arg(dir.join("include"))
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected palu.h"),
            Err(_) => eprintln!("{compiler} not found; skipping compile check"),
        }
    }
}
