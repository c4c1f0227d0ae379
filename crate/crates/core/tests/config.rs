use man_core::arch::{Attention, Ffn, LkaSpec, ManConfig, Variant};
use man_core::config::*;
use man_core::optim::TrainConfig;
use man_core::Error;

#[test]
fn empty_document_is_the_tiny_x4_scratch_run() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg.man_config().unwrap(), ManConfig::tiny(4));
    assert_eq!(cfg.train_config().unwrap(), TrainConfig::scratch());
    let p = cfg.protocol();
    assert!(p.y_channel && !p.self_ensemble);
    assert_eq!((p.shave, p.scale), (4, 4));
}

#[test]
fn overrides_apply_on_top_of_presets() {
    let text = r#"
[model]
variant = "custom"
scale = 2
n_blocks = 1
width = 16
attention = "mlka_subset:3-5-1+5-7-1"
ffn = "mlp"

[train]
preset = "ablation"
total_iters = 500
batch = 4
grad_clip = 0.5

[eval]
shave = 0
self_ensemble = true
"#;
    let cfg = RunConfig::parse(text).unwrap();
    let m = cfg.man_config().unwrap();
    assert_eq!((m.variant, m.scale, m.n_blocks, m.width), (Variant::Custom, 2, 1, 16));
    assert_eq!(
        m.attention,
        Attention::MlkaSubset(vec![LkaSpec::PRESETS[0], "5-7-1".parse::<LkaSpec>().unwrap()])
    );
    assert_eq!(m.ffn, Ffn::Mlp);
    let t = cfg.train_config().unwrap();
    assert_eq!((t.total_iters, t.batch, t.grad_clip), (500, 4, Some(0.5)));
    assert_eq!(t.lr0, 5e-4);
    let p = cfg.protocol();
    assert_eq!((p.shave, p.self_ensemble), (0, true));
}

#[test]
fn unknown_keys_are_errors() {
    for text in [
        "[model]\nwidht = 3\n",
        "[train]\nlr = 1e-3\n",
        "[eval]\ny_only = true\n",
        "[data]\ntrain = \"x\"\n",
        "[extras]\n",
        "seed = 3\n",
    ] {
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn invalid_values_are_config_errors() {
    for text in [
        "[model]\nscale = 5\n",
        "[model]\nvariant = \"tiny\"\nwidth = 60\n",
        "[model]\nvariant = \"custom\"\nwidth = 16\n",
        "[model]\nattention = \"lka_single:5-8-1\"\n",
        "[train]\nbatch = 0\n",
        "[train]\nlr0 = -1.0\n",
        "[model]\nscale = \"four\"\n",
    ] {
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn resolved_document_round_trips() {
    let texts = [
        "",
        "[model]\nvariant = \"light\"\nscale = 3\n[train]\npreset = \"finetune\"\n",
        "[model]\nvariant = \"custom\"\nwidth = 12\nn_blocks = 2\nblock_style = \"rcan\"\ntail = \"conv3x3\"\n\
         [data]\nmode = \"paired_dirs\"\ntrain_dir = \"data/train\"\n\
         [data.eval_synthetic]\nkind = \"scene\"\ncount = 5\nsize = 64\nseed = 9\n",
    ];
    for text in texts {
        let cfg = RunConfig::parse(text).unwrap();
        let resolved = cfg.resolved().unwrap();
        let doc = resolved.to_toml().unwrap();
        let back = RunConfig::parse(&doc).unwrap();
        assert_eq!(back, resolved, "{doc}");
        assert_eq!(back.man_config().unwrap(), cfg.man_config().unwrap());
        assert_eq!(back.train_config().unwrap(), cfg.train_config().unwrap());
        assert_eq!(back.protocol(), cfg.protocol());
        assert_eq!(back.resolved().unwrap(), resolved);
    }
}

#[test]
fn load_names_the_missing_path() {
    let err = RunConfig::load(std::path::Path::new("/nonexistent/run.toml")).unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("/nonexistent/run.toml")));
}

#[test]
fn synthetic_sets_are_quantized_and_deterministic() {
    let spec = Synthetic {
        kind: SynthKind::Smooth,
        count: 2,
        size: 24,
        seed: 1,
    };
    let a = spec.build(2).unwrap();
    let b = spec.build(2).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a.pairs[1].hr, b.pairs[1].hr);
    assert_eq!(a.pairs[0].id, "synth0");
    assert!(a.pairs[0].hr.data().iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-4));
    assert_eq!(a.pairs[0].lr.h(), 12);

    let data = DataSection {
        train_synthetic: Some(spec),
        ..DataSection::default()
    };
    assert_eq!(data.train_set(2).unwrap().len(), 2);
    assert!(data.eval_set(2).unwrap().is_none());
    assert!(matches!(DataSection::default().train_set(2), Err(Error::Config(_))));
}
