use super::*;
use crate::tensor::{grad_check, Tensor};

fn eval(logits: &[f64], y: usize, f: impl Fn(&mut Graph<f64>, Var, &[usize]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec([1, logits.len()], logits.to_vec()).unwrap());
    let out = f(&mut g, x, &[y]).unwrap();
    g.value(out).item()
}

fn ce(logits: &[f64], y: usize) -> f64 {
    eval(logits, y, |g, x, l| cross_entropy(g, x, l))
}

#[test]
fn cross_entropy_examples() {
    assert!(ce(&[50.0, 0.0, 0.0], 0) < 1e-20);
    assert!((ce(&[0.3; 7], 4) - 7f64.ln()).abs() < 1e-12);
    assert!((ce(&[1.0, 0.0, 0.0], 0) - 0.551_445).abs() < 1e-6);
}

#[test]
fn labels_are_validated() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(cross_entropy(&mut g, x, &[0, 3]), Err(Error::Input(_))));
    assert!(matches!(cross_entropy(&mut g, x, &[0]), Err(Error::Input(_))));
    let one = g.constant(Tensor::zeros([1, 1]));
    assert!(matches!(nontarget_softmax(&mut g, one, &[0]), Err(Error::Input(_))));
    assert!(matches!(label_smoothing_loss(&mut g, x, &[0, 1], 1.0), Err(Error::Input(_))));
    assert!(matches!(
        compact_loss(&mut g, x, &[0, 1], -0.1, KlVariant::Standard),
        Err(Error::Input(_))
    ));
}

#[test]
fn label_smoothing_examples() {
    let logits = [0.4, -1.1, 2.0, 0.0];
    let plain = ce(&logits, 2);
    assert_eq!(eval(&logits, 2, |g, x, l| label_smoothing_loss(g, x, l, 0.0)), plain);
    // p = (0.9, 0.1)
    let two = [0.9f64.ln(), 0.1f64.ln()];
    let got = eval(&two, 0, |g, x, l| label_smoothing_loss(g, x, l, 0.1));
    assert!((got - 0.215_221).abs() < 1e-6, "{got}");
}

#[test]
fn nontarget_softmax_examples() {
    let run = |logits: &[f64], y: usize| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec([1, logits.len()], logits.to_vec()).unwrap());
        let p = nontarget_softmax(&mut g, x, &[y]).unwrap();
        g.value(p).data().to_vec()
    };
    for v in run(&[0.5; 4], 1) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let p = run(&[7.0, 3f64.ln(), 0.0], 0);
    assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    assert_eq!(run(&[-3.0, 9.0], 1), vec![1.0]);
}

#[test]
fn compact_loss_examples() {
    let compact = |logits: &[f64], y, beta| eval(logits, y, move |g, x, l| compact_loss(g, x, l, beta, KlVariant::Standard));
    assert!((compact(&[0.0, 0.0, 0.0], 0, 0.7) - 3f64.ln()).abs() < 1e-12);
    let got = compact(&[0.0, 3f64.ln(), 0.0], 0, 0.2);
    assert!((got - 1.636_903).abs() < 1e-6, "{got}");
    let two = [0.7, -0.4];
    assert_eq!(compact(&two, 1, 0.5), ce(&two, 1));
}

#[test]
fn regularizer_terms_of_worked_example() {
    // p' = (0.75, 0.25): KL(u'||p') = 0.143841, KL(p'||u') = 0.130812
    let logits = [0.0, 3f64.ln(), 0.0];
    let standard = eval(&logits, 0, |g, x, l| compact_regularizer(g, x, l, KlVariant::Standard));
    assert!((standard - 0.5 * (0.143_841 + 0.130_812)).abs() < 1e-6);
    let unweighted = eval(&logits, 0, |g, x, l| compact_regularizer(g, x, l, KlVariant::Unweighted));
    // unweighted sum is (C-1) KL(u'||p')
    assert!((unweighted - 0.5 * (0.143_841 + 2.0 * 0.143_841)).abs() < 1e-6);
}

#[test]
fn zero_beta_is_bitwise_cross_entropy() {
    let logits = [0.31, -2.2, 1.7, 0.05, -0.6];
    for y in 0..5 {
        let c = eval(&logits, y, |g, x, l| compact_loss(g, x, l, 0.0, KlVariant::Standard));
        assert_eq!(c.to_bits(), ce(&logits, y).to_bits());
    }
}

#[test]
fn batch_loss_is_the_mean_of_clip_losses() {
    let rows = [[0.2, -0.3, 1.0], [2.0, 0.0, -1.0]];
    let labels = [2, 1];
    let cfgs = [
        LossConfig {
            kind: LossKind::CrossEntropy,
            ..LossConfig::default()
        },
        LossConfig {
            kind: LossKind::LabelSmoothing,
            ..LossConfig::default()
        },
        LossConfig::default(),
        LossConfig {
            kl_variant: KlVariant::Unweighted,
            ..LossConfig::default()
        },
    ];
    for cfg in cfgs {
        let single: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| eval(r, y, |g, x, l| cfg.apply(g, x, l)))
            .sum::<f64>()
            / 2.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec([2, 3], rows.concat()).unwrap());
        let out = cfg.apply(&mut g, x, &labels).unwrap();
        assert!((g.value(out).item() - single).abs() < 1e-12, "{cfg:?}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let logits = Tensor::from_vec([3, 4], vec![0.3, -1.2, 0.8, 0.1, 2.0, -0.5, 0.0, 0.4, -0.9, 1.1, 0.2, -0.3]).unwrap();
    let labels = [1usize, 0, 3];
    for cfg in [
        LossConfig {
            kind: LossKind::CrossEntropy,
            ..LossConfig::default()
        },
        LossConfig {
            kind: LossKind::LabelSmoothing,
            ..LossConfig::default()
        },
        LossConfig::default(),
        LossConfig {
            kl_variant: KlVariant::Unweighted,
            ..LossConfig::default()
        },
    ] {
        let report = grad_check(
            |g, p| cfg.apply(g, p[0], &labels).map_err(|e| crate::tensor::TensorError::Invalid(e.to_string())),
            std::slice::from_ref(&logits),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{cfg:?}: {report:?}");
    }
}

#[test]
fn metric_examples() {
    let r = uar_war(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
    assert_eq!((r.uar, r.war), (1.0, 1.0));

    let m = ConfusionMatrix::from_counts(2, vec![8, 2, 3, 7]).unwrap();
    let r = m.report().unwrap();
    assert_eq!(r.per_class_recall, vec![Some(0.8), Some(0.7)]);
    assert!((r.uar - 0.75).abs() < 1e-15);
    assert_eq!(r.war, 0.75);

    let m = ConfusionMatrix::from_counts(2, vec![5, 5, 9, 81]).unwrap();
    let r = m.report().unwrap();
    assert!((r.uar - 0.7).abs() < 1e-15);
    assert_eq!(r.war, 0.86);
}

#[test]
fn absent_classes_are_flagged_and_excluded() {
    let r = uar_war(&[0, 0, 2], &[0, 0, 0], 3).unwrap();
    assert_eq!(r.absent_classes(), vec![1, 2]);
    assert!((r.uar - 2.0 / 3.0).abs() < 1e-15);
    assert!(r.key_values().contains("recall_1=absent"));
    assert!(r.to_text().contains("absent"));
}

#[test]
fn metric_errors() {
    assert!(uar_war(&[], &[], 2).is_err());
    assert!(uar_war(&[0], &[0, 1], 2).is_err());
    assert!(uar_war(&[2], &[0], 2).is_err());
}

#[test]
fn serializations() {
    let m = ConfusionMatrix::from_counts(2, vec![8, 2, 3, 7]).unwrap();
    let r = m.report().unwrap();
    assert_eq!(r.confusion_csv(), "true\\pred,0,1\n0,8,2\n1,3,7\n");
    let kv = r.key_values();
    assert!(kv.lines().any(|l| l == "war=0.75"));
    assert!(kv.lines().any(|l| l == "samples=20"));
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0f64; 4]), 0);
}
