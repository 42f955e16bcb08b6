use std::collections::BTreeSet;

use forge_core::codec::{decode_program, encode_program};
use forge_core::generator::{generate_nth, GenConfig};
use forge_core::rasp::{
    infer_specs_with, interpret, parse, render, selector_shape_with, values_match, Evaluated, InferConfig, Interpreter,
    Node, Program, RaspConfig, Ref, Value,
};
use proptest::prelude::*;

fn program(seed: u64, index: u64) -> Program {
    generate_nth(&GenConfig { seed, ..Default::default() }, index).unwrap().0
}

fn generated() -> impl Strategy<Value = Program> {
    (0u64..1 << 20, 0u64..1 << 20).prop_map(|(s, i)| program(s, i))
}

fn small_config() -> impl Strategy<Value = RaspConfig> {
    (1u8..=3, 1usize..=4).prop_map(|(v, l)| RaspConfig::small(v, l))
}

/// Every input of `cfg`, enumerated independently of the library.
fn every_input(cfg: &RaspConfig) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<u8>> = vec![Vec::new()];
    for _ in 0..cfg.max_seq_len {
        layer = layer
            .iter()
            .flat_map(|s| {
                (0..cfg.vocab_size).map(move |t| {
                    let mut n = s.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Values each sequence node takes over `inputs`, and the widest selector row
/// plus whether any row was empty for each selector node.
fn observe(p: &Program, cfg: &RaspConfig, inputs: &[Vec<u8>]) -> (Vec<BTreeSet<Value>>, Vec<(usize, bool)>) {
    let interp = Interpreter::new(p, cfg);
    let mut values = vec![BTreeSet::new(); p.len()];
    let mut rows = vec![(0usize, false); p.len()];
    for x in inputs {
        let Ok(all) = interp.run_all(x) else { continue };
        for (i, e) in all.iter().enumerate() {
            match e {
                Evaluated::Sop(v) => values[i].extend(v.iter().copied()),
                Evaluated::Selector(m) => {
                    for r in m {
                        let w = r.iter().filter(|&&s| s).count();
                        rows[i].0 = rows[i].0.max(w);
                        rows[i].1 |= w == 0;
                    }
                }
            }
        }
    }
    (values, rows)
}

fn close_to_some(v: &Value, set: &[Value]) -> bool {
    set.iter().any(|s| values_match(&[*v], &[*s], 1e-9))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn text_round_trip(p in generated()) {
        let text = render(&p);
        prop_assert_eq!(parse(&text).unwrap(), p.clone());
        prop_assert_eq!(render(&parse(&text).unwrap()), text);
    }

    #[test]
    fn codec_round_trip(p in generated()) {
        let tokens = encode_program(&p).unwrap();
        prop_assert_eq!(tokens.len(), 4 * p.len());
        prop_assert_eq!(decode_program(&tokens).unwrap(), p);
    }

    #[test]
    fn decoding_is_total(tokens in prop::collection::vec(0u32..40, 0..80)) {
        if let Err(e) = decode_program(&tokens) {
            prop_assert!(e.position <= tokens.len());
        }
    }

    #[test]
    fn canonicalization_is_idempotent_and_keeps_the_function(p in generated(), cfg in small_config()) {
        let c = p.canonicalize();
        prop_assert_eq!(c.canonicalize(), c.clone());
        prop_assert_eq!(c.len(), p.len());
        for x in every_input(&cfg) {
            match (interpret(&p, &cfg, &x), interpret(&c, &cfg, &x)) {
                (Ok(a), Ok(b)) => prop_assert!(values_match(&a, &b, 1e-12)),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }
    }

    #[test]
    fn exhaustive_value_sets_are_exact(p in generated(), cfg in small_config()) {
        let limits = InferConfig { value_set_cap: usize::MAX, exhaustive_limit: u128::MAX };
        let specs = infer_specs_with(&p, &cfg, &limits);
        prop_assume!(specs.is_ok());
        let specs = specs.unwrap();
        let (seen, _) = observe(&p, &cfg, &every_input(&cfg));
        for (i, spec) in specs.nodes.iter().enumerate() {
            if let Some(spec) = spec {
                prop_assert_eq!(spec.values.iter().copied().collect::<BTreeSet<_>>(), seen[i].clone(), "var{}", i + 1);
            }
        }
    }

    #[test]
    fn static_value_sets_cover_every_run(p in generated(), cfg in small_config()) {
        let limits = InferConfig { value_set_cap: 1 << 16, exhaustive_limit: 0 };
        let specs = infer_specs_with(&p, &cfg, &limits);
        prop_assume!(specs.is_ok());
        let specs = specs.unwrap();
        let (seen, _) = observe(&p, &cfg, &every_input(&cfg));
        for (i, spec) in specs.nodes.iter().enumerate() {
            if let Some(spec) = spec {
                for v in &seen[i] {
                    prop_assert!(close_to_some(v, &spec.values), "var{} produced {} outside its static set", i + 1, v);
                }
            }
        }
    }

    #[test]
    fn static_selector_shapes_are_sound(p in generated(), cfg in small_config()) {
        let (_, rows) = observe(&p, &cfg, &every_input(&cfg));
        for (i, node) in p.nodes().iter().enumerate() {
            if let Node::Select { .. } = node {
                let shape = selector_shape_with(&p, Ref::Node(i), &cfg, 0);
                if shape.width_at_most_one {
                    prop_assert!(rows[i].0 <= 1, "var{} is wider than one", i + 1);
                }
                if shape.never_empty {
                    prop_assert!(!rows[i].1, "var{} has an empty row", i + 1);
                }
            }
        }
    }
}
