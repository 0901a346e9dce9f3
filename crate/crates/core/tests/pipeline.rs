use serde_json::json;

use map_core::config::RunConfig;
use map_core::data::{load_dataset, synth_generate, ClassRole, SynthSpec, ATTRIBUTES_FILE};
use map_core::harness::{evaluate_run, load_run, run_train};
use map_core::text::AttributeFile;

fn small_spec() -> SynthSpec {
    SynthSpec {
        classes: 4,
        base_classes: 2,
        motif_dim: 8,
        tokens_per_image: 4,
        attributes_per_class: 2,
        samples_per_class: 6,
        train_per_class: 4,
        ..SynthSpec::default()
    }
}

#[test]
fn generated_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (made, attrs) = synth_generate(&small_spec(), dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest, made.manifest);
    for i in 0..made.len() {
        assert_eq!(loaded.image(i), made.image(i));
    }
    let reread = AttributeFile::load(&dir.path().join(ATTRIBUTES_FILE)).unwrap();
    assert_eq!(reread.classes, attrs.classes);
    assert_eq!(loaded.manifest.classes_with_role(ClassRole::Novel), vec![2, 3]);
}

#[test]
fn trained_checkpoint_reproduces_its_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_generate(&small_spec(), &data).unwrap();
    let cfg = RunConfig::resolve(&[json!({
        "data": data,
        "attributes": data.join(ATTRIBUTES_FILE),
        "out": dir.path().join("run"),
        "shots": 4, "epochs": 3, "batch_size": 4,
        "n_textual_prompts": 2, "n_visual_prompts": 2, "lambda": 2,
        "vit_layers": 2, "vit_width": 8, "vit_heads": 2, "tokens_per_image": 4, "avae_layer": 1,
        "text_width": 8, "text_heads": 2, "text_layers": 1, "embed_dim": 8, "text_vocab_size": 64
    })])
    .unwrap();
    let outcome = run_train(&cfg).unwrap();
    assert_eq!(outcome.epochs.len(), 3);

    let (stored, model) = load_run(&dir.path().join("run")).unwrap();
    assert_eq!(stored, cfg);
    assert!(!model.params.is_empty());
    let again = evaluate_run(&dir.path().join("run"), &cfg, Some(ClassRole::Base)).unwrap();
    assert_eq!(again, outcome.reports[0].1);
}
