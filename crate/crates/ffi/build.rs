use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let out = PathBuf::from(&crate_dir).join("include").join("advlab.h");
    std::fs::create_dir_all(out.parent().unwrap()).expect("create include dir");

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(cbindgen::Config::from_file("cbindgen.toml").expect("parse cbindgen.toml"))
        .generate()
        .expect("generate C header")
        .write_to_file(&out);
}
