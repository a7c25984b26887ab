use gmope::experts::{Activation, EncoderConfig, ExpertEnsemble, Pooling};
use gmope::graph::Graph;
use gmope::objectives::*;
use gmope::prompt::PromptBank;
use gmope::router::{hard_route, soft_route, RoutingDecision, ScoreDirection};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let mut up = x.clone();
        up[[i, j]] += h;
        let mut down = x.clone();
        down[[i, j]] -= h;
        g[[i, j]] = (f(&up) - f(&down)) / (2.0 * h);
    }
    g
}

fn assert_close(analytic: &Array2<f64>, numeric: &Array2<f64>, tol: f64) {
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert!(rel_err(*a, *n) < tol || (a - n).abs() < 1e-8, "analytic {a} vs numeric {n}");
    }
}

#[test]
fn link_loss_gradient() {
    let z = random_matrix(5, 3, 1);
    let pos = [(0, 1), (1, 2), (3, 4)];
    let neg = [(0, 4), (2, 3), (1, 1)];
    let analytic = link_bce_with_grad(&z, &pos, &neg).unwrap().grad;
    let numeric = numeric_grad(&z, |z| gae_loss(z, &pos, &neg).unwrap());
    assert_close(&analytic, &numeric, 1e-5);
}

#[test]
fn dgi_gradients() {
    let real = random_matrix(4, 3, 2);
    let corrupt = random_matrix(4, 3, 3);
    let w = random_matrix(3, 3, 4);
    let loss = |r: &Array2<f64>, c: &Array2<f64>, w: &Array2<f64>| {
        let s = dgi_summary(r);
        dgi_loss(r, c, s.view(), w).unwrap()
    };
    let g = dgi_with_grad(&real, &corrupt, &w).unwrap();
    assert!((g.value - loss(&real, &corrupt, &w)).abs() < 1e-14);
    assert_close(&g.grad_real, &numeric_grad(&real, |r| loss(r, &corrupt, &w)), 1e-5);
    assert_close(&g.grad_corrupt, &numeric_grad(&corrupt, |c| loss(&real, c, &w)), 1e-5);
    assert_close(&g.grad_weight, &numeric_grad(&w, |w| loss(&real, &corrupt, w)), 1e-5);
}

#[test]
fn contrastive_gradients_and_lower_bound() {
    let a = random_matrix(4, 3, 5);
    let b = random_matrix(4, 3, 6);
    for t in [0.2, 1.0] {
        let g = graphcl_with_grad(&a, &b, t).unwrap();
        assert!(g.value >= 0.0);
        assert_close(&g.grad_view1, &numeric_grad(&a, |a| graphcl_loss(a, &b, t).unwrap()), 1e-5);
        assert_close(&g.grad_view2, &numeric_grad(&b, |b| graphcl_loss(&a, b, t).unwrap()), 1e-5);
    }
    // Orthogonal positives at a tiny temperature: softmax is nearly one-hot.
    let e = Array2::<f64>::eye(3);
    let near_zero = graphcl_loss(&e, &e, 0.01).unwrap();
    assert!((0.0..1e-12).contains(&near_zero));
}

#[test]
fn cross_entropy_gradient() {
    let logits = random_matrix(5, 4, 7);
    let rows = [0, 2, 3];
    let labels = [1, 0, 3];
    let g = softmax_cross_entropy_with_grad(&logits, &rows, &labels).unwrap();
    let probe = |l: &Array2<f64>| {
        let p = softmax_rows(l).select(ndarray::Axis(0), &rows);
        task_cross_entropy(&p, &labels).unwrap()
    };
    assert!((g.value - probe(&logits)).abs() < 1e-12);
    assert_close(&g.grad, &numeric_grad(&logits, probe), 1e-5);
}

#[test]
fn losses_are_finite_and_non_negative() {
    for seed in 0..20 {
        let z = random_matrix(6, 4, 100 + seed) * 20.0;
        assert!(gae_loss(&z, &[(0, 1), (2, 3)], &[(4, 5)]).unwrap() >= 0.0);
        let w = random_matrix(4, 4, 200 + seed) * 5.0;
        let s = dgi_summary(&z);
        let d = dgi_loss(&z, &random_matrix(6, 4, 300 + seed), s.view(), &w).unwrap();
        assert!(d.is_finite() && d >= 0.0);
        let c = graphcl_loss(&z, &random_matrix(6, 4, 400 + seed), 0.05).unwrap();
        assert!(c.is_finite() && c >= 0.0);
        let degenerate: Array2<f64> = array![[0.0, 1.0, 0.0]];
        assert!(task_cross_entropy(&degenerate, &[0]).unwrap().is_finite());
    }
}

fn encoder_config(input: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        input_dim: input,
        hidden_dim: 4,
        output_dim: 3,
        bias: true,
        activation: Activation::Tanh,
        self_loops: true,
    }
}

fn small_graph(n: usize, seed: u64) -> PreparedGraph<f64> {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.push((0, n / 2));
    let g = Graph::new(n, edges, random_matrix(n, 3, seed)).unwrap();
    PreparedGraph::new(g, true)
}

struct Model {
    ensemble: ExpertEnsemble<f64>,
    bank: PromptBank<f64>,
    discs: Vec<Array2<f64>>,
}

fn model(m: usize) -> Model {
    Model {
        ensemble: ExpertEnsemble::build(m, encoder_config(5), 11).unwrap(),
        bank: PromptBank::init(m, 2, 12).unwrap(),
        discs: (0..m).map(|i| init_discriminator(3, i, 13)).collect(),
    }
}

fn pretrain_total(plan: &PretrainPlan<f64>, model: &Model, decision: &RoutingDecision<f64>, lambda: f64) -> f64 {
    let pending: Vec<_> = (0..model.ensemble.len())
        .map(|i| {
            plan.evaluate(
                PromptedExpert::new(model.ensemble.expert(i), model.bank.prompt(i)),
                Some(&model.discs[i]),
            )
            .unwrap()
        })
        .collect();
    pretrain_objective(plan, &pending, &model.ensemble, &model.bank, decision, lambda)
        .unwrap()
        .total
}

fn check_pretrain_gradients(strategy: Strategy, batch: Vec<PreparedGraph<f64>>, graph_level: bool) {
    let cfg = ObjectiveConfig {
        strategy,
        ..Default::default()
    };
    let plan = PretrainPlan::build(&cfg, &batch, graph_level, 41, 3).unwrap();
    let mut base = model(3);
    let decision = soft_route(&[0.4, 0.1, 0.9], 2, 0.8, ScoreDirection::PreferLow).unwrap();
    let lambda = 0.7;
    let pending: Vec<_> = (0..3)
        .map(|i| {
            plan.evaluate(
                PromptedExpert::new(base.ensemble.expert(i), base.bank.prompt(i)),
                Some(&base.discs[i]),
            )
            .unwrap()
        })
        .collect();
    let out = pretrain_objective(&plan, &pending, &base.ensemble, &base.bank, &decision, lambda).unwrap();

    let numeric_prompts = numeric_grad(base.bank.prompts(), |p| {
        let mut m = model(3);
        *m.bank.prompts_mut() = p.clone();
        pretrain_total(&plan, &m, &decision, lambda)
    });
    assert_close(&out.grads.prompts, &numeric_prompts, 1e-4);

    for e in 0..3 {
        let w0 = base.ensemble.expert(e).weights()[0].clone();
        let numeric = numeric_grad(&w0, |w| {
            let mut m = model(3);
            m.ensemble.expert_mut(e).unwrap().weights_mut()[0] = w.clone();
            pretrain_total(&plan, &m, &decision, lambda)
        });
        assert_close(&out.grads.experts[e].weights[0], &numeric, 1e-4);
        if !decision.is_active(e) {
            assert_eq!(out.grads.experts[e].squared_norm(), 0.0);
        }
    }
    if strategy == Strategy::Dgi {
        for e in decision.active.clone() {
            let numeric = numeric_grad(&base.discs[e], |w| {
                let mut m = model(3);
                m.discs[e] = w.clone();
                pretrain_total(&plan, &m, &decision, lambda)
            });
            assert_close(out.grads.discriminators[e].as_ref().unwrap(), &numeric, 1e-4);
        }
    }
    base.ensemble.set_frozen(true);
}

#[test]
fn pretrain_objective_gradients_gae() {
    check_pretrain_gradients(Strategy::Gae, vec![small_graph(7, 1)], false);
}

#[test]
fn pretrain_objective_gradients_edgepred() {
    check_pretrain_gradients(Strategy::EdgePred, vec![small_graph(7, 2), small_graph(6, 3)], true);
}

#[test]
fn pretrain_objective_gradients_dgi() {
    check_pretrain_gradients(Strategy::Dgi, vec![small_graph(6, 4)], false);
}

#[test]
fn pretrain_objective_gradients_graphcl_nodes() {
    check_pretrain_gradients(Strategy::GraphCl, vec![small_graph(8, 5)], false);
}

#[test]
fn pretrain_objective_gradients_graphcl_graphs() {
    let batch = (0..4).map(|i| small_graph(5 + i, 10 + i as u64)).collect();
    check_pretrain_gradients(Strategy::GraphCl, batch, true);
}

#[test]
fn pretrain_objective_argument_checks() {
    let m = model(2);
    let plan = PretrainPlan::build(&ObjectiveConfig::default(), &[small_graph(6, 1)], false, 1, 1).unwrap();
    let pending: Vec<_> = (0..2)
        .map(|i| plan.evaluate(PromptedExpert::new(m.ensemble.expert(i), m.bank.prompt(i)), None).unwrap())
        .collect();
    let d = hard_route(&[0.1, 0.2], 1, ScoreDirection::PreferLow).unwrap();
    assert!(pretrain_objective(&plan, &pending, &m.ensemble, &m.bank, &d, -0.1).is_err());
    let ok = pretrain_objective(&plan, &pending, &m.ensemble, &m.bank, &d, 0.0).unwrap();
    assert!((ok.total - pending[0].value / 2.0).abs() < 1e-15);
    // λ = 1 on a zero pretraining loss leaves only the orthogonality term.
    let zero = weighted_loss(&[vec![0.0], vec![0.0]], &d.weights).unwrap();
    assert_eq!(1.0 * ok.ortho + zero, ok.ortho);
    assert!(PretrainPlan::<f64>::build(&ObjectiveConfig::default(), &[small_graph(5, 1), small_graph(5, 2)], false, 1, 1).is_err());
    let single = ObjectiveConfig {
        strategy: Strategy::GraphCl,
        ..Default::default()
    };
    assert!(PretrainPlan::build(&single, &[small_graph(5, 1)], true, 1, 1)
        .and_then(|p| p.evaluate(PromptedExpert::new(m.ensemble.expert(0), m.bank.prompt(0)), None))
        .is_err());
}

#[test]
fn degenerate_pretrain_equals_strategy_loss() {
    let m = model(1);
    let plan = PretrainPlan::build(&ObjectiveConfig::default(), &[small_graph(9, 2)], false, 5, 0).unwrap();
    let expert = PromptedExpert::new(m.ensemble.expert(0), m.bank.prompt(0));
    let pending = vec![plan.evaluate(expert, None).unwrap()];
    let d = hard_route(&[pending[0].value], 1, ScoreDirection::PreferLow).unwrap();
    let out = pretrain_objective(&plan, &pending, &m.ensemble, &m.bank, &d, 0.0).unwrap();
    let mean = pending[0].per_sample.iter().sum::<f64>() / pending[0].per_sample.len() as f64;
    assert!((out.total - mean).abs() < 1e-12);
    assert!((out.total - pending[0].value).abs() < 1e-12);
}

fn finetune_total(plan: &TaskPlan<f64>, ens: &ExpertEnsemble<f64>, bank: &PromptBank<f64>, head: &TaskHead<f64>, d: &RoutingDecision<f64>, lambda: f64) -> f64 {
    let pending: Vec<_> = (0..ens.len())
        .map(|i| plan.evaluate(PromptedExpert::new(ens.expert(i), bank.prompt(i)), head).unwrap())
        .collect();
    finetune_objective(plan, &pending, ens, bank, head, d, lambda).unwrap().total
}

fn check_finetune(plan: TaskPlan<f64>, head: TaskHead<f64>) {
    let mut m = model(3);
    let d = soft_route(&[0.3, 0.5, 0.2], 3, 0.8, ScoreDirection::PreferLow).unwrap();
    let pending: Vec<_> = (0..3)
        .map(|i| plan.evaluate(PromptedExpert::new(m.ensemble.expert(i), m.bank.prompt(i)), &head).unwrap())
        .collect();
    assert!(matches!(
        finetune_objective(&plan, &pending, &m.ensemble, &m.bank, &head, &d, 0.5),
        Err(gmope::GmopeError::State(_))
    ));
    m.ensemble.set_frozen(true);
    let out = finetune_objective(&plan, &pending, &m.ensemble, &m.bank, &head, &d, 0.5).unwrap();
    assert_eq!(out.grads.expert_squared_norm(), 0.0);
    let numeric = numeric_grad(m.bank.prompts(), |p| {
        let mut bank = m.bank.clone();
        *bank.prompts_mut() = p.clone();
        finetune_total(&plan, &m.ensemble, &bank, &head, &d, 0.5)
    });
    assert_close(&out.grads.prompts, &numeric, 1e-4);
    let numeric = numeric_grad(&head.weight, |w| {
        let mut h = head.clone();
        h.weight = w.clone();
        finetune_total(&plan, &m.ensemble, &m.bank, &h, &d, 0.5)
    });
    assert_close(&out.grads.head.as_ref().unwrap().weight, &numeric, 1e-4);
}

#[test]
fn finetune_node_task() {
    let plan = TaskPlan::node(small_graph(8, 20), vec![0, 3, 5, 6], vec![1, 0, 2, 1]).unwrap();
    check_finetune(plan, TaskHead::classifier(3, 3, 9).unwrap());
}

#[test]
fn finetune_graph_task() {
    let graphs = (0..4).map(|i| small_graph(5 + i, 30 + i as u64)).collect();
    let plan = TaskPlan::graph(graphs, vec![0, 1, 1, 0], Pooling::Mean).unwrap();
    check_finetune(plan, TaskHead::classifier(3, 2, 9).unwrap());
}

#[test]
fn finetune_link_task() {
    let plan = TaskPlan::link(small_graph(8, 40), vec![(0, 1), (2, 3)], vec![(0, 5), (1, 6)]).unwrap();
    let mut head = TaskHead::link(3).unwrap();
    head.weight += &(random_matrix(3, 3, 41) * 0.1);
    check_finetune(plan, head);
}

#[test]
fn finetune_hard_route_single_branch() {
    let mut m = model(2);
    m.ensemble.set_frozen(true);
    let head = TaskHead::classifier(3, 2, 1).unwrap();
    let plan = TaskPlan::node(small_graph(6, 50), vec![0, 1, 2], vec![0, 1, 0]).unwrap();
    let pending: Vec<_> = (0..2)
        .map(|i| plan.evaluate(PromptedExpert::new(m.ensemble.expert(i), m.bank.prompt(i)), &head).unwrap())
        .collect();
    let d = hard_route(&[pending[0].value, pending[1].value], 1, ScoreDirection::PreferLow).unwrap();
    let chosen = d.active[0];
    let out = finetune_objective(&plan, &pending, &m.ensemble, &m.bank, &head, &d, 0.0).unwrap();
    assert!((out.total - pending[chosen].value / 2.0).abs() < 1e-15);
    let other = 1 - chosen;
    assert!(out.grads.prompts.row(other).iter().all(|&g| g == 0.0));
}
