use celldetr::{Config, Variant};

#[test]
fn partial_files_keep_defaults() {
    let cfg = Config::from_toml_str(
        r#"
[model]
variant = "B"
dropout = 0.1

[train]
total_epochs = 200
lr_drops = [50, 100]
batch_size = 8
"#,
    )
    .unwrap();
    assert_eq!(cfg.model.variant, Variant::B);
    assert_eq!(cfg.loss, Default::default());
    assert_eq!(cfg.train.lr_rest, 1e-4);
    let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn bad_files_are_rejected() {
    assert!(Config::from_toml_str("[model]\nwidth = 3\n").is_err());
    assert!(Config::from_toml_str("[train]\nlr_drops = [100, 50]\n").is_err());
    assert!(Config::from_toml_str("[train]\ntotal_epochs = 50\n").is_err());
    assert!(Config::from_toml_str("[train]\nbatch_size = 0\n").is_err());
    assert!(Config::from_toml_str("[model]\nvariant = \"C\"\n").is_err());
}
