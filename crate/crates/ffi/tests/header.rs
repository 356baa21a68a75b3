use std::path::Path;
use std::process::Command;

#[test]
fn header_declares_the_exported_functions() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fixlab.h")).unwrap();
    for name in [
        "fixlab_last_error",
        "fixlab_version",
        "fixlab_model_new",
        "fixlab_model_from_spec_json",
        "fixlab_model_free",
        "fixlab_model_load",
        "fixlab_model_save",
        "fixlab_model_predict",
        "fixlab_attack",
        "fixlab_radial_warp",
        "fixlab_retinal_resample",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct FixlabModel FixlabModel;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::env::var("CC").or_else(|_| which("cc")) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"fixlab.h\"\nint main(void) { FixlabModel *m = 0; (void)fixlab_model_classes(m); return FIXLAB_STATUS_OK; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which(name: &str) -> Result<String, ()> {
    std::env::var_os("PATH")
        .into_iter()
        .flat_map(|p| std::env::split_paths(&p).collect::<Vec<_>>())
        .map(|d| d.join(name))
        .find(|p| p.is_file())
        .map(|p| p.to_string_lossy().into_owned())
        .ok_or(())
}
