//! Small encoder–decoder transformer whose encoder reads either token ids or
//! per-position distributions over its source vocabulary.

pub mod checkpoint;
mod config;
mod model;
mod optim;

pub use config::TransformerConfig;
pub use model::{shift_right, Bound, Encoded, EncoderInput, EncoderOutput, TransformerModel};
pub use optim::{clip_factor, grad_norm_sq, Adam, AdamConfig};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, Tape, Tensor};
    use crate::data::{BOS, EOS};
    use crate::error::Error;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            src_vocab_size: 9,
            tgt_vocab_size: 7,
            max_len: 10,
            dropout_rate: 0.0,
            label_smoothing: 0.0,
        }
    }

    fn one_hot(tokens: &[usize], v: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| (0..v).map(|j| if j == t { 1.0 } else { 0.0 }).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = TransformerModel::init(TransformerConfig::with_vocab(20, 22), 1).unwrap();
        let b = TransformerModel::init(TransformerConfig::with_vocab(20, 22), 1).unwrap();
        let c = TransformerModel::init(TransformerConfig::with_vocab(20, 22), 2).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x == y));
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x != y));
        let enc = a.encode_hard(&[5, 6, 7, EOS]).unwrap();
        let logits = a.decode_teacher_forced(&enc, &[BOS, 9, 4]).unwrap();
        assert_eq!(logits.shape(), &[3, 22]);
        assert!(logits.is_finite());
    }

    #[test]
    fn config_validation() {
        let mut c = TransformerConfig::with_vocab(10, 10);
        c.num_heads = 3;
        assert!(matches!(TransformerModel::init(c, 0), Err(Error::Config(_))));
        assert!(TransformerModel::init(TransformerConfig::default(), 0).is_err());
    }

    #[test]
    fn hard_and_one_hot_soft_encodings_are_bit_equal() {
        let m = TransformerModel::init(TransformerConfig::with_vocab(12, 12), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let len = rng.gen_range(1..10);
            let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..12)).collect();
            let hard = m.encode_hard(&toks).unwrap();
            let soft = m.encode_soft(&one_hot(&toks, 12)).unwrap();
            assert_eq!(hard.states.data(), soft.states.data());
        }
    }

    #[test]
    fn uniform_row_averages_two_embeddings() {
        let m = TransformerModel::init(tiny(), 4).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(m.source_embedding().clone());
        let mut row = vec![0.0; 9];
        row[5] = 0.5;
        row[7] = 0.5;
        let w = tape.constant(Tensor::from_rows(&[row]).unwrap());
        let mixed = tape.matmul(w, e).unwrap();
        let emb = m.source_embedding();
        for j in 0..8 {
            let avg = 0.5 * emb.row(5)[j] + 0.5 * emb.row(7)[j];
            assert!((tape.value(mixed).data()[j] - avg).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_input_contract_errors() {
        let m = TransformerModel::init(tiny(), 4).unwrap();
        let mut bad = one_hot(&[1, 2], 9);
        bad.data_mut()[3] = -0.1;
        assert!(matches!(m.encode_soft(&bad), Err(Error::Contract(_))));
        assert!(matches!(m.encode_soft(&one_hot(&[1], 8)), Err(Error::Shape { .. })));
        assert!(matches!(m.encode_hard(&[9]), Err(Error::Index { .. })));
        assert!(matches!(
            m.encode_hard(&[4; 11]),
            Err(Error::Length { len: 11, max: 10 })
        ));
    }

    #[test]
    fn soft_encoder_gradient_matches_finite_differences() {
        let m = TransformerModel::init(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = Tensor::uniform(&[3, 9], 1.0, &mut rng);
        let w0 = Tensor::new(vec![3, 9], w0.data().iter().map(|x| x.abs()).collect()).unwrap();
        let head = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        let report = grad_check(
            |tape, w| {
                let b = m.bind(tape, false);
                let enc = b.encode(tape, EncoderInput::Soft { weights: w, lens: &[3] }, None)?;
                let h = tape.constant(head.clone());
                let prod = tape.mul(enc.states, h)?;
                Ok(tape.sum(prod))
            },
            &w0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn decoder_is_causal() {
        let m = TransformerModel::init(tiny(), 6).unwrap();
        let enc = m.encode_hard(&[4, 5, 6, EOS]).unwrap();
        let base = [BOS, 4, 5, 6, 3];
        let a = m.decode_teacher_forced(&enc, &base).unwrap();
        for j in 1..base.len() {
            let mut alt = base;
            alt[j] = if alt[j] == 6 { 4 } else { 6 };
            let b = m.decode_teacher_forced(&enc, &alt).unwrap();
            for t in 0..base.len() {
                let same = a.row(t) == b.row(t);
                assert_eq!(same, t < j, "position {t} after perturbing {j}");
            }
        }
    }

    #[test]
    fn teacher_forcing_matches_stepwise_decoding() {
        let m = TransformerModel::init(TransformerConfig::with_vocab(11, 13), 7).unwrap();
        let enc = m.encode_hard(&[4, 8, 9, EOS]).unwrap();
        let prefix = [BOS, 5, 12, 7, 6];
        let logits = m.decode_teacher_forced(&enc, &prefix).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let p = tape.softmax(l, 1).unwrap();
        let probs = tape.value(p).clone();
        for t in 0..prefix.len() {
            let step = m.decode_step(&enc, &prefix[..=t]).unwrap();
            let s: f64 = step.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for (a, b) in step.iter().zip(probs.row(t)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let batch = m
            .decode_step_batch(&enc, &[prefix[..2].to_vec(), prefix.to_vec()])
            .unwrap();
        assert_eq!(batch[1], m.decode_step(&enc, &prefix).unwrap());
        assert!(matches!(m.decode_step(&enc, &[5]), Err(Error::Contract(_))));
        assert!(matches!(m.decode_step(&enc, &[BOS; 17]), Err(Error::Length { .. })));
    }

    #[test]
    fn packed_batch_equals_individual_runs() {
        let m = TransformerModel::init(tiny(), 8).unwrap();
        let srcs = vec![vec![4, 5, EOS], vec![6, 7, 8, 4, EOS]];
        let tgts = vec![vec![BOS, 4], vec![BOS, 5, 6, 3]];
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let enc = b.encode(&mut tape, EncoderInput::Hard(&srcs), None).unwrap();
        let logits = b.decode(&mut tape, &enc, &tgts, &[0, 1], None).unwrap();
        let packed = tape.value(logits).clone();
        let mut row = 0;
        for (s, t) in srcs.iter().zip(&tgts) {
            let e = m.encode_hard(s).unwrap();
            let single = m.decode_teacher_forced(&e, t).unwrap();
            for r in 0..t.len() {
                for (x, y) in single.row(r).iter().zip(packed.row(row + r)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            row += t.len();
        }
    }

    #[test]
    fn checkpoint_round_trip_and_layout() {
        let m = TransformerModel::init(tiny(), 9).unwrap();
        let bytes = checkpoint::to_bytes(&m);
        let header = "SOFTPIVOT-CHECKPOINT 1\nnum_layers=1\nd_model=8\nnum_heads=2\nd_ff=16\n\
                      src_vocab_size=9\ntgt_vocab_size=7\nmax_len=10\ndropout_rate=0.0\n\
                      label_smoothing=0.0\n";
        assert!(bytes.starts_with(header.as_bytes()));
        let rest = &bytes[header.len()..];
        let count_line = format!("tensors={}\n", m.params().len());
        assert!(rest.starts_with(count_line.as_bytes()));
        let rec = &rest[count_line.len()..];
        let name = "encoder.embed";
        assert_eq!(&rec[..4], &(name.len() as u32).to_le_bytes());
        assert_eq!(&rec[4..4 + name.len()], name.as_bytes());
        let r = &rec[4 + name.len()..];
        assert_eq!(&r[..4], &2u32.to_le_bytes());
        assert_eq!(&r[4..12], &9u64.to_le_bytes());
        assert_eq!(&r[12..20], &8u64.to_le_bytes());
        assert_eq!(&r[20..28], &m.source_embedding().data()[0].to_le_bytes());

        let back = checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.config(), m.config());
        assert!(back.params().iter().zip(m.params()).all(|(a, b)| a == b));
        assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3], "mem").is_err());
        assert!(checkpoint::from_bytes(b"nope\n", "mem").is_err());
    }
}
