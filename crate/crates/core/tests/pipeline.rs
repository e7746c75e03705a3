//! Library-level flows that cross module boundaries.

use attnlab::analysis::{entropy_profile, export_attention, read_csv};
use attnlab::autograd::model_backward;
use attnlab::numerics::Rng;
use attnlab::tasks::{sample_batch, TaskKind, TaskSpec};
use attnlab::training::{cross_entropy, teacher_forcing, train, TrainConfig};
use attnlab::transformer::model::{attention_maps, forward_batch};
use attnlab::transformer::{ModelConfig, ModelParams, PeMode};
use attnlab::{Matrix64, ModelParams64};

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        n_layers: 2,
        max_len: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn trained_model_entropies_stay_in_bounds() {
    let cfg = small();
    let task = TaskSpec::new(TaskKind::Sort, 6, 2, 6, 4).unwrap();
    let params: ModelParams64 = ModelParams::init(&cfg, &mut Rng::seed(4)).unwrap();
    let tcfg = TrainConfig {
        max_steps: 30,
        warmup_steps: 20,
        batch_size: 8,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let trained = train(params, &cfg, &tcfg, &task, None).unwrap().params;
    for (src, tgt) in sample_batch(&task, 5, &mut Rng::seed(8)) {
        let prefix = &tgt[..tgt.len() - 1];
        let p = entropy_profile(&trained, &cfg, &src, prefix).unwrap();
        let (ls, lt) = ((src.len() as f64).ln(), (prefix.len() as f64).ln());
        let within = |v: &Vec<Vec<f64>>, hi: f64| v.iter().flatten().all(|&e| (0.0..=hi + 1e-9).contains(&e));
        assert!(within(&p.encoder_self, ls) && within(&p.decoder_cross, ls) && within(&p.decoder_self, lt));
    }
}

#[test]
fn exported_maps_reimport_exactly() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, &mut Rng::seed(6)).unwrap();
    let maps = attention_maps(&[1, 4, 5, 6, 2], &[1, 6, 5], &params, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = export_attention(maps.decoder_self[1].as_slice(), dir.path(), "dec1").unwrap();
    assert_eq!(paths.len(), 2);
    for (path, w) in paths.iter().zip(&maps.decoder_self[1]) {
        let back: Matrix64 = read_csv(path).unwrap();
        assert!(back.max_abs_diff(w).unwrap() <= 1e-12);
        for i in 0..back.rows() {
            assert!(back.row(i)[i + 1..].iter().all(|&v| v == 0.0), "causal row {i}");
        }
    }
}

// Learned positions, pre-norm and a smooth activation go through the same
// loss-and-backward path the trainer uses.
#[test]
fn alternate_architecture_trains_through_the_public_api() {
    let cfg = ModelConfig {
        pe_mode: PeMode::Learned,
        norm_placement: attnlab::transformer::NormPlacement::PreNorm,
        activation: attnlab::transformer::Activation::Gelu,
        ..small()
    };
    let task = TaskSpec::new(TaskKind::Copy, 6, 2, 5, 2).unwrap();
    let params = ModelParams::<f64>::init(&cfg, &mut Rng::seed(2)).unwrap();
    let batch = sample_batch(&task, 4, &mut Rng::seed(3));
    let srcs: Vec<&[usize]> = batch.iter().map(|(s, _)| s.as_slice()).collect();
    let tgts: Vec<Vec<usize>> = batch.iter().map(|(_, t)| t.clone()).collect();
    let (inputs, targets) = teacher_forcing(&tgts);
    let (logits, tape) = forward_batch(&srcs, &inputs, &params, &cfg, &mut Rng::seed(1), true).unwrap();
    let (loss, dlogits) = cross_entropy(&logits, &targets, 0.1).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let grads = model_backward(&tape, &params, &dlogits).unwrap();
    assert!(grads.global_norm() > 0.0);
    assert_eq!(grads.names(), params.names());
}
