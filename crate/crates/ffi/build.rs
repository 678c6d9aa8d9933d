use std::env;
use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    std::fs::create_dir_all(dir.join("include")).unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    let mut config = cbindgen::Config::default();
    config.enumeration.rename_variants = cbindgen::RenameRule::QualifiedScreamingSnakeCase;
    let bindings = cbindgen::Builder::new()
        .with_config(config)
        .with_crate(&dir)
        .with_language(cbindgen::Language::C)
        .with_include_guard("ADAPTCL_H")
        .with_documentation(true)
        .with_cpp_compat(true)
        .generate()
        .expect("cbindgen");
    bindings.write_to_file(dir.join("include/adaptcl.h"));
    bindings.write_to_file(PathBuf::from(env::var("OUT_DIR").unwrap()).join("adaptcl.h"));
}
