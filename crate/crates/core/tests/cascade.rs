use softpivot::cascade::{
    encode_pairs, finetune, generate_pseudo_pivot, pretrain, CascadeModel, FinetuneConfig, Pair, TrainConfig,
    TrilingualExample,
};
use softpivot::data::{generate_synthetic, SyntheticTask, SyntheticTaskSpec, Vocab};
use softpivot::decoding::BeamConfig;
use softpivot::transformer::{AdamConfig, TransformerConfig, TransformerModel};

fn task() -> SyntheticTask {
    generate_synthetic(&SyntheticTaskSpec {
        latent_vocab_size: 8,
        min_len: 2,
        max_len: 5,
        sp_size: 3000,
        pt_size: 3000,
        st_size: 200,
        valid_size: 100,
        test_size: 100,
        ..Default::default()
    })
    .unwrap()
}

struct Vocabs {
    src: Vocab,
    piv: Vocab,
    tgt: Vocab,
}

fn vocabs(t: &SyntheticTask) -> Vocabs {
    Vocabs {
        src: Vocab::build(t.sp.src.iter().chain(&t.st.src).map(String::as_str)),
        piv: Vocab::build(t.sp.tgt.iter().chain(&t.pt.src).map(String::as_str)),
        tgt: Vocab::build(t.pt.tgt.iter().chain(&t.st.tgt).map(String::as_str)),
    }
}

fn model(v_in: usize, v_out: usize, seed: u64) -> TransformerModel {
    let cfg = TransformerConfig {
        num_layers: 1,
        d_model: 32,
        num_heads: 4,
        d_ff: 64,
        src_vocab_size: v_in,
        tgt_vocab_size: v_out,
        max_len: 8,
        ..Default::default()
    };
    TransformerModel::init(cfg, seed).unwrap()
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        max_tokens: 400,
        eval_every: steps,
        seed: 5,
        optim: AdamConfig {
            peak_lr: 3e-3,
            warmup_steps: 50,
            ..Default::default()
        },
    }
}

fn train(init: TransformerModel, train: &[Pair], valid: &[Pair], steps: usize) -> TransformerModel {
    pretrain(init, train, valid, &train_cfg(steps)).unwrap().model
}

fn beam() -> BeamConfig {
    BeamConfig {
        beam_size: 5,
        max_len: 7,
        ..Default::default()
    }
}

fn oracle_match(t: &SyntheticTask, v: &Vocabs, sp: &TransformerModel) -> f64 {
    let srcs: Vec<Vec<usize>> = t.st_test.src.iter().map(|s| v.src.encode(s)).collect();
    let piv = generate_pseudo_pivot(sp, &srcs, &beam()).unwrap();
    let hits = t
        .st_test
        .src
        .iter()
        .zip(&piv)
        .filter(|(s, p)| t.oracle_sp(s).as_deref() == Some(v.piv.decode(p).as_str()))
        .count();
    hits as f64 / srcs.len() as f64
}

#[test]
fn pseudo_pivots_match_the_oracle_once_converged() {
    let t = task();
    let v = vocabs(&t);
    let init = model(v.src.len(), v.piv.len(), 1);
    assert!(
        oracle_match(&t, &v, &init) < 0.05,
        "an untrained model should not translate"
    );
    let sp = train(
        init,
        &encode_pairs(&t.sp, &v.src, &v.piv),
        &encode_pairs(&t.sp_valid, &v.src, &v.piv),
        600,
    );
    let rate = oracle_match(&t, &v, &sp);
    assert!(rate >= 0.95, "oracle match {rate}");
    assert!(generate_pseudo_pivot(&sp, &[], &beam()).unwrap().is_empty());
}

#[test]
fn finetuning_moves_both_halves() {
    let t = task();
    let v = vocabs(&t);
    let sp = train(
        model(v.src.len(), v.piv.len(), 2),
        &encode_pairs(&t.sp, &v.src, &v.piv),
        &encode_pairs(&t.sp_valid, &v.src, &v.piv),
        100,
    );
    let pt = train(
        model(v.piv.len(), v.tgt.len(), 3),
        &encode_pairs(&t.pt, &v.piv, &v.tgt),
        &encode_pairs(&t.pt_valid, &v.piv, &v.tgt),
        100,
    );
    let triples = |c: &softpivot::data::ParallelCorpus| -> Vec<TrilingualExample> {
        let srcs: Vec<Vec<usize>> = c.src.iter().map(|s| v.src.encode(s)).collect();
        let piv = generate_pseudo_pivot(&sp, &srcs, &beam()).unwrap();
        srcs.into_iter()
            .zip(piv)
            .zip(&c.tgt)
            .map(|((src, piv), tgt)| TrilingualExample {
                src,
                piv,
                tgt: v.tgt.encode(tgt),
            })
            .collect()
    };
    let (tr, va) = (triples(&t.st), triples(&t.st_valid));
    let cm = CascadeModel::new(sp, pt).unwrap();
    let cfg = FinetuneConfig {
        train: train_cfg(20),
        max_decode_len: 7,
        ..Default::default()
    };
    let out = finetune(cm.clone(), &tr, &va[..20], &cfg).unwrap();
    let delta = |a: &TransformerModel, b: &TransformerModel| -> f64 {
        a.params()
            .iter()
            .zip(b.params())
            .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
            .sum()
    };
    assert!(delta(&cm.sp, &out.model.sp) > 0.0);
    assert!(delta(&cm.pt, &out.model.pt) > 0.0);
}
