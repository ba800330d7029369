fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        pragma_once: true,
        include_guard: None,
        cpp_compat: true,
        documentation: true,
        header: Some(
            "/* C ABI for the anomalens two-stage anomaly-detection pipeline. */".to_string(),
        ),
        ..Default::default()
    };

    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(format!("{crate_dir}/include/anomalens.h"));
        }
        Err(err) => {
            // keep the committed header usable when cbindgen cannot run
            println!("cargo:warning=cbindgen failed: {err}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
