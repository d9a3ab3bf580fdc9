//! Structural properties of the pruned backward pass on randomized graphs.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{param_nodes, random_net, random_subset, step, Gen};
use udta::arch::{build_network, Config, ModelSpec};
use udta::graph::Gradients;
use udta::{Component, ForwardOptions, ModelGraph, Op, SampleShape, Shape, Tensor, TrainableSet};

fn same_gradients(a: &Gradients<f64>, b: &Gradients<f64>) -> bool {
    a.len() == b.len()
        && a.iter().all(|(id, ga)| {
            b.get(id).is_some_and(|gb| {
                ga.iter().zip(gb).all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adapter_training_never_visits_the_backbone(
        seed in any::<u64>(),
        backbone in 2usize..8,
        adapter in 1usize..5,
        mask in any::<u64>(),
    ) {
        let mut net = random_net(seed, Gen { backbone, adapter, kinked: true });
        prop_assert!(net.graph.check_unidirectional().is_ok());
        let candidates = param_nodes(&net.graph, |c| matches!(c, Component::Adapter | Component::Classifier));
        let trainable = TrainableSet::new(&net.graph, random_subset(&candidates, mask)).unwrap();
        let (grads, trace) = step(&mut net, &trainable);
        prop_assert_eq!(trace.count(Component::Backbone), 0);
        prop_assert_eq!(trace.count(Component::Encoder), 0);
        prop_assert_eq!(trace.visited_ids(), net.graph.compute_required_set(net.loss, &trainable).unwrap());
        prop_assert_eq!(grads.len(), trainable.len());
        prop_assert!(trainable.iter().all(|id| grads.get(id).is_some()));
    }

    #[test]
    fn backbone_training_visits_every_backbone_node_above_it(
        seed in any::<u64>(),
        backbone in 2usize..8,
        pick in any::<prop::sample::Index>(),
    ) {
        let mut net = random_net(seed, Gen { backbone, adapter: 1, kinked: true });
        let bb = param_nodes(&net.graph, |c| c == Component::Backbone);
        prop_assume!(!bb.is_empty());
        let low = bb[pick.index(bb.len())];
        let trainable = TrainableSet::new(&net.graph, [low]).unwrap();
        let (_, trace) = step(&mut net, &trainable);
        // every backbone node downstream of `low` is on a path to the loss
        let mut below = vec![false; net.graph.len()];
        below[low.0] = true;
        for node in net.graph.nodes() {
            if node.inputs.iter().any(|i| below[i.0]) {
                below[node.id.0] = true;
            }
        }
        for node in net.graph.nodes() {
            if node.component == Component::Backbone && below[node.id.0] {
                prop_assert!(trace.contains(node.id), "{} missing from trace", node.name);
            }
        }
        prop_assert!(trace.count(Component::Backbone) > 0);
    }

    #[test]
    fn every_visited_node_changes_some_gradient(
        seed in any::<u64>(),
        backbone in 2usize..6,
        adapter in 1usize..4,
        mask in any::<u64>(),
    ) {
        let mut net = random_net(seed, Gen { backbone, adapter, kinked: false });
        prop_assume!(net.graph.len() <= 20);
        let candidates = param_nodes(&net.graph, |_| true);
        let trainable = TrainableSet::new(&net.graph, random_subset(&candidates, mask)).unwrap();
        let (full, trace) = step(&mut net, &trainable);
        for id in trace.visited_ids() {
            let ablated = net.graph.backward_ablated(net.loss, &trainable, id).unwrap();
            prop_assert!(!same_gradients(&full, &ablated), "removing {} changed nothing", net.graph.node(id).name);
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_gradients(seed in any::<u64>(), mask in any::<u64>()) {
        let run = || {
            let mut net = random_net(seed, Gen { backbone: 5, adapter: 3, kinked: true });
            let all = param_nodes(&net.graph, |_| true);
            let trainable = TrainableSet::new(&net.graph, random_subset(&all, mask)).unwrap();
            step(&mut net, &trainable)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        prop_assert!(same_gradients(&a, &b));
        prop_assert_eq!(ta.to_json(), tb.to_json());
    }
}

#[test]
fn chain_examples() {
    // a -> b -> c(loss)
    let mut g = ModelGraph::<f64>::new();
    let x = g.input("x", SampleShape::new(2, 1, 1)).unwrap();
    let a = g.add("a", Op::Linear { out_features: 2, bias: true }, &[x], Component::Backbone).unwrap();
    let b = g.add("b", Op::Linear { out_features: 2, bias: true }, &[a], Component::Backbone).unwrap();
    let c = g.add("c", Op::Linear { out_features: 2, bias: true }, &[b], Component::Classifier).unwrap();
    let loss = g.add("loss", Op::CrossEntropy, &[c], Component::Classifier).unwrap();
    let only = |id| TrainableSet::new(&g, [id]).unwrap();
    assert_eq!(g.compute_required_set(loss, &only(a)).unwrap(), [a, b, c, loss].into_iter().collect());
    assert_eq!(g.compute_required_set(loss, &only(c)).unwrap(), [c, loss].into_iter().collect());
}

#[test]
fn desk_model_patch_trace_covers_backbone_above_lowest_patch() {
    let spec = ModelSpec::desk();
    let mut net = build_network::<f32>(&spec, Config::ModelPatch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    net.graph.initialize(&mut rng, |_| true);
    let r = spec.input_resolution;
    let x = Tensor::from_fn(Shape::new(2, 3, r, r), |_| rng.gen_range(0.0..1.0));
    let opts = ForwardOptions::train(&net.graph, &net.trainable).with_labels(vec![0, 1]);
    net.graph.forward(&x, &opts).unwrap();
    let (_, trace) = net.graph.backward(net.loss, &net.trainable).unwrap();
    let lowest = net.trainable.iter().filter(|&id| net.graph.node(id).component == Component::Patch).min().unwrap();
    for node in net.graph.nodes() {
        let on_path = node.id > lowest && matches!(node.component, Component::Backbone | Component::Patch);
        if on_path && net.graph.compute_required_set(net.loss, &net.trainable).unwrap().contains(&node.id) {
            assert!(trace.contains(node.id));
        }
    }
    for name in ["backbone.b1.dw.conv", "backbone.head.conv", "backbone.pool"] {
        assert!(trace.contains(net.graph.find(name).unwrap()), "{name}");
    }
}
