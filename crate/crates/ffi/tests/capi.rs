//! Exercises the C ABI surface exactly as a foreign caller would: through
//! raw pointers and status codes.

use std::ffi::{CStr, CString};
use std::ptr;

use advlab_ffi::*;

fn tmpdir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(name);
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(advlab_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn version_is_present() {
    let v = unsafe { CStr::from_ptr(advlab_version()) };
    assert!(!v.to_bytes().is_empty());
}

#[test]
fn dataset_lifecycle() {
    let mut ds: *mut AdvlabDataset = ptr::null_mut();
    let code = unsafe { advlab_dataset_synth(2, 5, 8, 42, &mut ds) };
    assert_eq!(code, AdvlabStatus::Ok);
    let mut len = 0usize;
    assert_eq!(
        unsafe { advlab_dataset_len(ds, &mut len) },
        AdvlabStatus::Ok
    );
    assert_eq!(len, 10);

    let dir = tmpdir("advlab_ffi_ds");
    let root = CString::new(dir.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { advlab_dataset_save_folder(ds, root.as_ptr()) },
        AdvlabStatus::Ok
    );
    let mut back: *mut AdvlabDataset = ptr::null_mut();
    assert_eq!(
        unsafe { advlab_dataset_load_folder(root.as_ptr(), &mut back) },
        AdvlabStatus::Ok
    );
    let mut back_len = 0usize;
    unsafe { advlab_dataset_len(back, &mut back_len) };
    assert_eq!(back_len, 10);

    unsafe {
        advlab_dataset_free(ds);
        advlab_dataset_free(back);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn model_build_save_load_roundtrip() {
    let arch = CString::new("mlp:1x8x8:16:2").unwrap();
    let mut model: *mut AdvlabModel = ptr::null_mut();
    assert_eq!(
        unsafe { advlab_model_build(arch.as_ptr(), 7, &mut model) },
        AdvlabStatus::Ok
    );

    let mut id_ptr: *mut std::ffi::c_char = ptr::null_mut();
    assert_eq!(
        unsafe { advlab_model_arch_id(model, &mut id_ptr) },
        AdvlabStatus::Ok
    );
    let id = unsafe { CStr::from_ptr(id_ptr) }
        .to_string_lossy()
        .into_owned();
    assert_eq!(id, "mlp:1x8x8:16:2");
    unsafe { advlab_string_free(id_ptr) };

    let dir = tmpdir("advlab_ffi_model");
    let path = CString::new(dir.join("m.dpat").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { advlab_model_save(model, path.as_ptr()) },
        AdvlabStatus::Ok
    );
    let mut loaded: *mut AdvlabModel = ptr::null_mut();
    assert_eq!(
        unsafe { advlab_model_load(path.as_ptr(), &mut loaded) },
        AdvlabStatus::Ok
    );

    unsafe {
        advlab_model_free(model);
        advlab_model_free(loaded);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bad_arch_id_reports_not_found() {
    let arch = CString::new("resnet34:3x224x224:7").unwrap();
    let mut model: *mut AdvlabModel = ptr::null_mut();
    let code = unsafe { advlab_model_build(arch.as_ptr(), 1, &mut model) };
    assert_eq!(code, AdvlabStatus::NotFound);
    assert!(last_error().contains("resnet34"));
}

#[test]
fn train_attack_evaluate_through_the_abi() {
    let mut ds: *mut AdvlabDataset = ptr::null_mut();
    unsafe { advlab_dataset_synth(2, 16, 8, 3, &mut ds) };

    let arch = CString::new("smallcnn:1x8x8:2").unwrap();
    let mut model: *mut AdvlabModel = ptr::null_mut();
    assert_eq!(
        unsafe { advlab_model_build(arch.as_ptr(), 5, &mut model) },
        AdvlabStatus::Ok
    );

    let cfg = CString::new(
        "train.method = std\ntrain.epochs = 10\ntrain.batch_size = 8\ntrain.lr = 0.003\n",
    )
    .unwrap();
    assert_eq!(
        unsafe { advlab_train(model, ds, ptr::null(), cfg.as_ptr()) },
        AdvlabStatus::Ok
    );

    let mut acc = 0.0f64;
    assert_eq!(
        unsafe { advlab_accuracy(model, ds, &mut acc) },
        AdvlabStatus::Ok
    );
    assert!(acc > 0.6, "trained accuracy {acc}");

    // single-image prediction agrees with dataset accuracy mechanics
    let mut label = 99u32;
    let pixels = vec![0.5f64; 64];
    assert_eq!(
        unsafe { advlab_predict(model, pixels.as_ptr(), pixels.len(), &mut label) },
        AdvlabStatus::Ok
    );
    assert!(label < 2);

    // wrong pixel count is an invalid argument
    let code = unsafe { advlab_predict(model, pixels.as_ptr(), 63, &mut label) };
    assert_eq!(code, AdvlabStatus::InvalidArgument);

    let name = CString::new("3-PGD").unwrap();
    let mut adv: *mut AdvlabDataset = ptr::null_mut();
    let mut flip = -1.0f64;
    assert_eq!(
        unsafe {
            advlab_attack_dataset(model, ds, name.as_ptr(), 0.3, 0.15, 9, &mut adv, &mut flip)
        },
        AdvlabStatus::Ok
    );
    assert!((0.0..=1.0).contains(&flip));
    let mut adv_acc = 0.0f64;
    unsafe { advlab_accuracy(model, adv, &mut adv_acc) };
    assert!(adv_acc <= 1.0);

    unsafe {
        advlab_dataset_free(adv);
        advlab_dataset_free(ds);
        advlab_model_free(model);
    }
}

#[test]
fn generated_header_exists_with_expected_symbols() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("advlab.h");
    let text = std::fs::read_to_string(&header).expect("cbindgen header generated at build time");
    for symbol in [
        "AdvlabStatus",
        "AdvlabModel",
        "AdvlabDataset",
        "advlab_model_build",
        "advlab_attack_dataset",
        "advlab_train",
        "advlab_last_error",
    ] {
        assert!(text.contains(symbol), "header is missing {symbol}");
    }
}
