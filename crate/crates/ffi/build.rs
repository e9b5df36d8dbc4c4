use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("emsca.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        header: Some("/* C interface to the emsca classification pipeline. */".into()),
        include_guard: Some("EMSCA_H".into()),
        cpp_compat: true,
        documentation: true,
        ..cbindgen::Config::default()
    };

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen header generation")
        .write_to_file(&header);

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=build.rs");
}
