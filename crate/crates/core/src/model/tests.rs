use super::*;
use crate::corpus::{next_batch, AttentionMode};
use crate::tensor::gelu_scalar;

fn config() -> ModelConfig {
    ModelConfig {
        text_dim: 6,
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_len: 6,
        dropout: 0.0,
        activation: Activation::Gelu,
        num_items: 12,
    }
}

fn text(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..12 * 6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![12, 6], data).unwrap()
}

fn set(t: &mut Tensor<f64>, v: f64) {
    t.data_mut().iter_mut().for_each(|x| *x = v);
}

fn adapted(model: &Model<f64>, text: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Some(text)).unwrap();
    let out = model.adapter_forward(&mut tape, &bound).unwrap();
    tape.value(out).clone()
}

fn embedded(model: &Model<f64>, text: &Tensor<f64>, batch: &InputBatch) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Some(text)).unwrap();
    let items = model.item_representations(&mut tape, &bound).unwrap();
    let e = model.embed(&mut tape, &bound, items, batch).unwrap();
    tape.value(e).clone()
}

fn forward(model: &Model<f64>, text: &Tensor<f64>, batch: &InputBatch) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Some(text)).unwrap();
    let (_, out) = model.encode(&mut tape, &bound, batch, None).unwrap();
    tape.value(out).clone()
}

fn input(rows: &[Vec<usize>], mode: AttentionMode) -> InputBatch {
    let len = rows.iter().map(Vec::len).max().unwrap();
    let mut inputs = vec![0; rows.len() * len];
    let mut pad = vec![true; rows.len() * len];
    for (b, r) in rows.iter().enumerate() {
        for (t, &i) in r.iter().enumerate() {
            inputs[b * len + t] = i;
            pad[b * len + t] = false;
        }
    }
    InputBatch { batch: rows.len(), len, inputs, pad, mode, lengths: rows.iter().map(Vec::len).collect() }
}

#[test]
fn zero_adapter_gives_zero_rows() {
    let mut m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    let a = m.params.adapter.as_mut().unwrap();
    for t in [&mut a.w1, &mut a.b1, &mut a.w2, &mut a.b2] {
        set(t, 0.0);
    }
    assert!(adapted(&m, &text(0)).data().iter().all(|&v| v == 0.0));
}

#[test]
fn adapter_closed_form() {
    let c = 0.7;
    let mut m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    let a = m.params.adapter.as_mut().unwrap();
    set(&mut a.w1, 0.0);
    set(&mut a.b1, c);
    set(&mut a.w2, 0.0);
    for i in 0..8 {
        a.w2.data_mut()[i * 8 + i] = 1.0;
    }
    set(&mut a.b2, 0.0);
    let want = gelu_scalar(gelu_scalar(c));
    assert!(adapted(&m, &text(0)).data().iter().all(|&v| v == want));
}

#[test]
fn text_width_mismatch_is_rejected() {
    let m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    let wrong = Tensor::<f64>::zeros(&[12, 5]);
    let mut tape = Tape::new();
    assert!(matches!(m.bind(&mut tape, Some(&wrong)), Err(Error::Shape(_))));
    assert!(matches!(m.bind(&mut tape, None), Err(Error::Mode(_))));
}

#[test]
fn embedding_identities() {
    let t = text(2);
    let batch = input(&[vec![3, 5, 3]], AttentionMode::Causal);

    let mut m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    set(&mut m.params.position, 0.0);
    let e = embedded(&m, &t, &batch);
    let rows = adapted(&m, &t);
    assert_eq!(e.row(0), rows.row(3));
    assert_eq!(e.row(1), rows.row(5));

    let mut m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    let a = m.params.adapter.as_mut().unwrap();
    set(&mut a.w2, 0.0);
    set(&mut a.b2, 0.0);
    let e = embedded(&m, &t, &batch);
    assert_eq!(e.row(1), m.params.position.row(1));

    let m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    let e = embedded(&m, &t, &input(&[vec![4, 4]], AttentionMode::Causal));
    let p = &m.params.position;
    for j in 0..8 {
        let lhs = e.row(0)[j] - e.row(1)[j];
        let rhs = p.row(0)[j] - p.row(1)[j];
        assert!((lhs - rhs).abs() < 1e-15);
    }
}

#[test]
fn mask_index_reads_mask_vector() {
    let mut m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    set(&mut m.params.position, 0.0);
    let e = embedded(&m, &text(0), &input(&[vec![12, 0]], AttentionMode::Bidirectional));
    assert_eq!(e.row(0), m.params.mask_token.as_ref().unwrap().data());

    let id = Model::<f64>::new(config(), ItemSource::IdOnly, 1).unwrap();
    let mut tape = Tape::new();
    let bound = id.bind(&mut tape, None).unwrap();
    let items = id.item_representations(&mut tape, &bound).unwrap();
    let bad = input(&[vec![12]], AttentionMode::Causal);
    assert!(matches!(id.embed(&mut tape, &bound, items, &bad), Err(Error::Index(_))));
}

#[test]
fn too_long_sequence_is_index_error() {
    let m = Model::<f64>::new(config(), ItemSource::Text, 1).unwrap();
    let t = text(0);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, Some(&t)).unwrap();
    let items = m.item_representations(&mut tape, &bound).unwrap();
    let long = input(&[vec![1; 7]], AttentionMode::Causal);
    assert!(matches!(m.embed(&mut tape, &bound, items, &long), Err(Error::Index(_))));
}

#[test]
fn zero_layers_is_identity() {
    let m = Model::<f64>::new(ModelConfig { layers: 0, ..config() }, ItemSource::Text, 1).unwrap();
    let t = text(0);
    let batch = input(&[vec![1, 2, 3]], AttentionMode::Causal);
    assert_eq!(forward(&m, &t, &batch), embedded(&m, &t, &batch));
}

#[test]
fn causal_outputs_ignore_later_positions() {
    let m = Model::<f64>::new(config(), ItemSource::Text, 4).unwrap();
    let t = text(1);
    let base = forward(&m, &t, &input(&[vec![1, 2, 3, 4, 5]], AttentionMode::Causal));
    for last in [0, 7, 11] {
        let other = forward(&m, &t, &input(&[vec![1, 2, 3, 4, last]], AttentionMode::Causal));
        assert_eq!(&base.data()[..4 * 8], &other.data()[..4 * 8]);
    }
    let changed = forward(&m, &t, &input(&[vec![1, 2, 3, 9, 5]], AttentionMode::Causal));
    assert_eq!(&base.data()[..3 * 8], &changed.data()[..3 * 8]);
    assert_ne!(&base.data()[3 * 8..], &changed.data()[3 * 8..]);
}

#[test]
fn bidirectional_outputs_see_the_future() {
    let m = Model::<f64>::new(config(), ItemSource::Text, 4).unwrap();
    let t = text(1);
    let a = forward(&m, &t, &input(&[vec![1, 2, 3, 4, 5]], AttentionMode::Bidirectional));
    let b = forward(&m, &t, &input(&[vec![1, 2, 3, 4, 8]], AttentionMode::Bidirectional));
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn padding_never_leaks() {
    let m = Model::<f64>::new(config(), ItemSource::Text, 4).unwrap();
    let t = text(1);
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let mut batch = input(&[vec![1, 2, 3, 4], vec![6, 7]], mode);
        let a = forward(&m, &t, &batch);
        batch.inputs[6] = 11;
        batch.inputs[7] = 9;
        let b = forward(&m, &t, &batch);
        assert_eq!(a.data()[..6 * 8], b.data()[..6 * 8]);
    }
}

#[test]
fn text_scores_symmetry_and_limit() {
    let rows = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2]]);
    assert_eq!(score_text(&[1.0, 2.0], &rows).unwrap(), vec![0.5, 0.5]);

    let rows = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
    let p: Vec<f64> = score_text(&[100.0, 0.0], &rows).unwrap();
    assert!((p[0] - 1.0).abs() < 1e-12);
    assert!(matches!(score_text(&[1.0], &rows), Err(Error::Shape(_))));
}

#[test]
fn id_scores_reduce_to_text_scores() {
    let rows = adapted(&Model::<f64>::new(config(), ItemSource::Text, 3).unwrap(), &text(3));
    let hidden: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
    let zeros = Tensor::<f64>::zeros(&[12, 8]);
    assert_eq!(score_text_id(&hidden, &rows, Some(&zeros)).unwrap(), score_text(&hidden, &rows).unwrap());
    assert!(matches!(score_text_id(&hidden, &rows, None), Err(Error::Mode(_))));

    // with zero text rows only the ID table matters
    let mut ids = Tensor::<f64>::zeros(&[12, 8]);
    for i in 0..8 {
        ids.data_mut()[i * 8 + i] = 1.0;
    }
    let p = score_text_id(&hidden, &Tensor::zeros(&[12, 8]), Some(&ids)).unwrap();
    let q = score_text(&hidden, &ids).unwrap();
    assert_eq!(p, q);
}

#[test]
fn text_id_model_with_zero_table_matches_text_model() {
    let text_model = Model::<f64>::new(config(), ItemSource::Text, 5).unwrap();
    let mut with_id = text_model.clone();
    with_id.add_id_table().unwrap();
    assert_eq!(with_id.source(), ItemSource::TextId);
    let t = text(5);
    let ctx: Vec<&[usize]> = vec![&[1, 2, 3], &[4, 5]];
    assert_eq!(text_model.context_scores(Some(&t), &ctx).unwrap(), with_id.context_scores(Some(&t), &ctx).unwrap());
    assert!(with_id.add_id_table().is_err());
}

#[test]
fn initial_loss_is_near_uniform() {
    let cfg = ModelConfig { num_items: 40, text_dim: 16, dim: 16, max_len: 10, ..config() };
    let m = Model::<f32>::new(cfg.clone(), ItemSource::Text, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut data = vec![0f32; 40 * 16];
    data.iter_mut().for_each(|v| *v = rng.sample::<f32, _>(StandardNormal) / 4.0);
    let t = Tensor::new(vec![40, 16], data).unwrap();
    let seqs: Vec<Vec<usize>> = (0..8).map(|u| (0..9).map(|k| (u * 5 + k * 3) % 40).collect()).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = next_batch(&refs, 9).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, Some(&t)).unwrap();
    let loss = m.loss(&mut tape, &bound, &batch, None).unwrap();
    let l = tape.value(loss).data()[0] as f64;
    assert!((l - 40f64.ln()).abs() < 0.1, "{l}");
}

#[test]
fn baseline_parameter_parity() {
    let text_model = Model::<f32>::new(config(), ItemSource::Text, 1).unwrap();
    let baseline = Model::<f32>::new(config(), ItemSource::IdOnly, 1).unwrap();
    let adapter: usize = {
        let a = text_model.params.adapter.as_ref().unwrap();
        a.w1.len() + a.b1.len() + a.w2.len() + a.b2.len()
    };
    let mask = text_model.params.mask_token.as_ref().unwrap().len();
    assert_eq!(baseline.param_count(), text_model.param_count() - adapter - mask + 12 * 8);
}

#[test]
fn checkpoint_roundtrip_and_mismatch() {
    let mut m = Model::<f32>::new(config(), ItemSource::Text, 9).unwrap();
    m.add_id_table().unwrap();
    let bytes = save_checkpoint(&m).unwrap();
    let back = load_checkpoint(&bytes, &config()).unwrap();
    assert_eq!(back.params.map(|t| t.data().to_vec()), m.params.map(|t| t.data().to_vec()));
    assert_eq!(save_checkpoint(&back).unwrap(), bytes);

    let wrong = ModelConfig { dim: 4, ..config() };
    assert!(matches!(load_checkpoint(&bytes, &wrong), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[3] = b'X';
    assert!(matches!(load_checkpoint(&bad, &config()), Err(Error::Format { .. })));
    let mut v2 = bytes;
    v2[4] = 2;
    assert!(matches!(load_checkpoint(&v2, &config()), Err(Error::UnsupportedVersion(2))));
}

#[test]
fn invalid_configs() {
    assert!(Model::<f32>::new(ModelConfig { heads: 3, ..config() }, ItemSource::Text, 0).is_err());
    assert!(Model::<f32>::new(ModelConfig { max_len: 1, ..config() }, ItemSource::Text, 0).is_err());
}
