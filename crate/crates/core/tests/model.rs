mod common;

use ndarray::{s, Array2};
use proptest::prelude::*;
use vdistill::model::{
    init_base_model, load_checkpoint, save_checkpoint, BlockParam, GradientTape, Model, ModelConfig, ParamId,
    TrainableSet,
};

const V_ORIG: usize = 40;
const V_EXT: usize = 3;

fn small(seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        v_ext: V_EXT,
        max_seq: 24,
        ..common::config(V_ORIG, 16, 2)
    };
    init_base_model(cfg, seed).unwrap()
}

fn ids_strategy() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(0u32..(V_ORIG + V_EXT) as u32, 1..24)
}

#[test]
fn output_shape_covers_both_vocabularies() {
    let m = small(1);
    let logits = m.forward(&[1, 2, 41, 3]).unwrap();
    assert_eq!(logits.dim(), (4, V_ORIG + V_EXT));
    assert!(m.forward(&[0; 25]).is_err());
    assert!(m.forward(&[]).is_err());
}

#[test]
fn zero_head_extension_gives_zero_columns() {
    let mut m = small(2);
    m.head.extension.fill(0.0);
    let logits = m.forward(&[5, 41, 7, 42, 9]).unwrap();
    assert!(logits.slice(s![.., V_ORIG..]).iter().all(|&x| x == 0.0));
}

#[test]
fn extension_ids_read_extension_rows() {
    let mut m = small(3);
    let src = 11;
    let row = m.embed.original.row(src).to_owned();
    m.embed.extension.row_mut(1).assign(&row);
    let a = m.forward(&[4, src as u32, 9]).unwrap();
    let b = m.forward(&[4, V_ORIG as u32 + 1, 9]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn concatenated_head_equals_single_product() {
    let m = small(4);
    let trace = m.forward_traced(&[3, 40, 12, 41, 0]).unwrap();
    // swapping in the stacked head as the original block reproduces all columns
    let mut single = m.clone();
    single.head.original = m.head.stacked();
    single.head.extension = Array2::zeros((0, m.config.d_model));
    single.config.v_orig += V_EXT;
    single.config.v_ext = 0;
    let logits = single.forward(&[3, 40, 12, 41, 0]).unwrap();
    let diff = (&logits - &trace.logits).mapv(f32::abs).fold(0f32, |a, &b| a.max(b));
    assert!(diff < 1e-6, "{diff}");
    assert_eq!(trace.hidden.len(), m.config.n_layers + 1);
    for h in &trace.hidden {
        assert_eq!(h.dim(), (5, m.config.d_model));
    }
}

#[test]
fn backward_needs_a_forward_pass() {
    let m = small(5);
    let tape = GradientTape::new(&m);
    let d = Array2::zeros((2, V_ORIG + V_EXT));
    assert!(tape.backward(&d, &TrainableSet::only([ParamId::EmbedExtension])).is_err());
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let m = small(6).cast::<f64>();
    let mut tape = GradientTape::new(&m);
    tape.forward(&[1, 40, 2]).unwrap();
    let set = TrainableSet::only([ParamId::EmbedExtension, ParamId::HeadOriginal, ParamId::Block(0, BlockParam::Wq)]);
    let g = tape.backward(&Array2::zeros((3, V_ORIG + V_EXT)), &set).unwrap();
    assert_eq!(g.len(), 3);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn checkpoint_file_round_trip() {
    let mut m = small(7);
    m.attach_lora(2, &BlockParam::LINEAR, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"VDCKPT1"));
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    save_checkpoint(&back, dir.path().join("again.ckpt")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("again.ckpt")).unwrap(), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rows_before_a_change_are_bit_identical(ids in ids_strategy(), at in any::<prop::sample::Index>(), new in 0u32..43) {
        let m = small(8);
        let k = at.index(ids.len());
        let mut other = ids.clone();
        other[k] = new;
        let (a, b) = (m.forward(&ids).unwrap(), m.forward(&other).unwrap());
        prop_assert_eq!(a.slice(s![..k, ..]), b.slice(s![..k, ..]));
    }

    #[test]
    fn zero_adapters_leave_outputs_unchanged(ids in ids_strategy(), seed in 0u64..1000) {
        let m = small(9);
        let mut adapted = m.clone();
        adapted.attach_lora(3, &BlockParam::LINEAR, seed).unwrap();
        let (a, b) = (m.forward(&ids).unwrap(), adapted.forward(&ids).unwrap());
        let diff = (&a - &b).mapv(f32::abs).fold(0f32, |x, &y| x.max(y));
        prop_assert!(diff <= 1e-7, "{}", diff);
    }

    #[test]
    fn rows_are_finite(ids in ids_strategy(), seed in 0u64..50) {
        let logits = small(seed).forward(&ids).unwrap();
        prop_assert!(logits.iter().all(|x| x.is_finite()));
    }
}
