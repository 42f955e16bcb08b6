use std::time::Instant;

use super::layout::{ResidualLayout, Segment, SegmentOwner};
use super::{CompileConfig, CompileError, CompiledTransformer, Placement, Role, WeightMatrix};
use crate::rasp::{
    default_value, infer_specs_with, selector_shape_with, value_kinds, Node, Program, ProgramSpecs, RaspConfig, Ref,
    Value, ValueKind,
};

const ONE: usize = ResidualLayout::ONE;
const BOS: usize = ResidualLayout::BOS;

/// Linear functional of the residual: `sum(coef * x[dim])`.
type Lin = Vec<(usize, f64)>;

/// One value of a sequence together with the residual functional that is 1
/// where the sequence holds that value and 0 elsewhere (including BOS).
struct Feature {
    value: Value,
    read: Lin,
}

/// Hidden ReLU unit of an MLP block.
struct Unit {
    input: Lin,
    output: Lin,
}

/// One attention head, as sparse entries `(row, col, value)`.
struct Head {
    d_head: usize,
    d_value: usize,
    query: Vec<(usize, usize, f64)>,
    key: Vec<(usize, usize, f64)>,
    value: Vec<(usize, usize, f64)>,
    output: Vec<(usize, usize, f64)>,
}

enum Stage {
    Attn(Head),
    Mlp(Vec<Unit>),
}

impl Stage {
    fn parity(&self) -> i64 {
        match self {
            Stage::Attn(_) => 0,
            Stage::Mlp(_) => 1,
        }
    }
}

struct Lowering<'a> {
    program: &'a Program,
    rasp: &'a RaspConfig,
    cfg: &'a CompileConfig,
    specs: ProgramSpecs,
    kinds: Vec<Option<ValueKind>>,
    layout: ResidualLayout,
    narrow: Vec<bool>,
}

/// Compiles `p` for inputs drawn from `rasp`.
pub fn compile(p: &Program, rasp: &RaspConfig, cfg: &CompileConfig) -> Result<CompiledTransformer, CompileError> {
    let start = Instant::now();
    let guard = || {
        if start.elapsed() > cfg.guard {
            Err(CompileError::GuardTimeout(cfg.guard))
        } else {
            Ok(())
        }
    };
    let specs = infer_specs_with(p, rasp, &cfg.infer)?;
    guard()?;
    for (i, spec) in specs.nodes.iter().enumerate() {
        let too_large =
            spec.iter().flat_map(|s| &s.values).any(|v| v.as_f64().is_some_and(|x| x.abs() > cfg.max_value_magnitude));
        if too_large {
            return Err(CompileError::ValueTooLarge { node: i, limit: cfg.max_value_magnitude });
        }
    }

    let kinds = value_kinds(p);
    let mut narrow = vec![false; p.len()];
    for (i, node) in p.nodes().iter().enumerate() {
        if let Node::Aggregate { selector, .. } = *node {
            narrow[i] = selector_shape_with(p, selector, rasp, cfg.infer.exhaustive_limit).width_at_most_one;
        }
    }
    guard()?;

    let mut layout = ResidualLayout::new();
    layout.push(SegmentOwner::Tokens, ValueKind::Categorical, specs.tokens.values.clone());
    layout.push(SegmentOwner::Indices, ValueKind::Categorical, specs.indices.values.clone());
    for (i, spec) in specs.nodes.iter().enumerate() {
        if let Some(s) = spec {
            layout.push(SegmentOwner::Node(i), s.kind, s.values.clone());
        }
    }
    for (i, node) in p.nodes().iter().enumerate() {
        match *node {
            Node::Aggregate { sop, .. } if kinds[i] == Some(ValueKind::Categorical) && !narrow[i] => {
                let values = specs.get(sop).expect("sequence operand").values.clone();
                layout.push(SegmentOwner::Scratch { node: i, part: 0 }, ValueKind::Categorical, values.clone());
                layout.push(SegmentOwner::Scratch { node: i, part: 1 }, ValueKind::Categorical, values);
            }
            Node::SelectorWidth { .. } => {
                layout.push(SegmentOwner::Scratch { node: i, part: 0 }, ValueKind::Numerical, Vec::new());
            }
            _ => {}
        }
    }

    let lowering = Lowering { program: p, rasp, cfg, specs, kinds, layout, narrow };
    let mut stages = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        stages.push(lowering.node_stages(i)?);
        guard()?;
    }
    Ok(lowering.assemble(stages))
}

impl Lowering<'_> {
    fn seg(&self, owner: SegmentOwner) -> &Segment {
        self.layout.segment(owner).expect("segment allocated")
    }

    fn seg_of(&self, r: Ref) -> &Segment {
        self.layout.of_ref(r).expect("sequence segment")
    }

    fn kind(&self, r: Ref) -> ValueKind {
        match r {
            Ref::Tokens | Ref::Indices => ValueKind::Categorical,
            Ref::Node(i) => self.kinds[i].expect("sequence node"),
        }
    }

    /// Per-value indicator functionals of a categorical or boolean sequence.
    fn features(&self, r: Ref, node: usize) -> Result<Vec<Feature>, CompileError> {
        let seg = self.seg_of(r);
        match seg.kind {
            ValueKind::Categorical => Ok(seg
                .values
                .iter()
                .enumerate()
                .map(|(i, &value)| Feature { value, read: vec![(seg.start + i, 1.0)] })
                .collect()),
            // false is `one - bos - x` so that it vanishes at BOS.
            ValueKind::Boolean => Ok(vec![
                Feature { value: Value::Bool(false), read: vec![(ONE, 1.0), (BOS, -1.0), (seg.start, -1.0)] },
                Feature { value: Value::Bool(true), read: vec![(seg.start, 1.0)] },
            ]),
            ValueKind::Numerical => Err(CompileError::Unsupported {
                node,
                reason: format!("{r} is numerical and cannot be used as a lookup operand"),
            }),
        }
    }

    /// Residual writes that place `y` into the segment of node `i`.
    fn write(&self, i: usize, y: Value) -> Lin {
        let seg = self.seg(SegmentOwner::Node(i));
        match seg.kind {
            ValueKind::Categorical => seg.dim_of(&y).map(|d| vec![(d, 1.0)]).unwrap_or_default(),
            ValueKind::Boolean | ValueKind::Numerical => {
                let x = y.as_f64().expect("numeric value");
                if x == 0.0 {
                    Vec::new()
                } else {
                    vec![(seg.start, x)]
                }
            }
        }
    }

    fn node_stages(&self, i: usize) -> Result<Vec<Stage>, CompileError> {
        let big = self.cfg.attention_sharpness;
        let mut stages = match self.program.nodes()[i] {
            Node::Select { .. } => Vec::new(),
            Node::Aggregate { selector, sop } => self.aggregate(i, selector, sop, big)?,
            Node::SelectorWidth { selector } => self.selector_width(i, selector, big)?,
            Node::Map { f, sop } => {
                let units = match self.kind(sop) {
                    ValueKind::Numerical => self.numeric_map(i, sop, |v| f.apply(v).expect("well typed")),
                    _ => self
                        .features(sop, i)?
                        .into_iter()
                        .map(|feat| Unit {
                            output: self.write(i, f.apply(feat.value).expect("well typed")),
                            input: feat.read,
                        })
                        .collect(),
                };
                vec![Stage::Mlp(units)]
            }
            Node::SequenceMap { f, lhs, rhs } => {
                let a = self.features(lhs, i)?;
                let mut units = Vec::new();
                if lhs == rhs {
                    for fa in &a {
                        let mut input: Lin = fa.read.iter().map(|&(d, c)| (d, 2.0 * c)).collect();
                        input.push((ONE, -1.0));
                        units.push(Unit {
                            input,
                            output: self.write(i, f.apply(fa.value, fa.value).expect("well typed")),
                        });
                    }
                } else {
                    let b = self.features(rhs, i)?;
                    for fa in &a {
                        for fb in &b {
                            let mut input = fa.read.clone();
                            input.extend(&fb.read);
                            input.push((ONE, -1.0));
                            let y = f.apply(fa.value, fb.value).expect("well typed");
                            units.push(Unit { input, output: self.write(i, y) });
                        }
                    }
                }
                vec![Stage::Mlp(units)]
            }
        };
        for s in &mut stages {
            if let Stage::Mlp(units) = s {
                units.retain(|u| !u.output.is_empty());
            }
        }
        stages.retain(|s| !matches!(s, Stage::Mlp(u) if u.is_empty()));
        Ok(stages)
    }

    /// Head realizing the `Select` node `selector`: matching keys score
    /// `big`, BOS scores `bos_score`, everything else 0.
    fn select_head(&self, selector: Ref, big: f64, bos_score: f64, d_value: usize) -> Result<Head, CompileError> {
        let s = selector.node().expect("selector is a node");
        let Node::Select { keys, queries, predicate } = self.program.nodes()[s] else {
            unreachable!("selector operand is a Select node")
        };
        let kf = self.features(keys, s)?;
        let qf = self.features(queries, s)?;
        let nk = kf.len();
        let mut head =
            Head { d_head: nk + 1, d_value, query: Vec::new(), key: Vec::new(), value: Vec::new(), output: Vec::new() };
        for q in &qf {
            for (j, k) in kf.iter().enumerate() {
                if predicate.holds(k.value, q.value) {
                    head.query.extend(q.read.iter().map(|&(d, c)| (d, j, c * big)));
                }
            }
        }
        head.query.push((ONE, nk, bos_score));
        for (j, k) in kf.iter().enumerate() {
            head.key.extend(k.read.iter().map(|&(d, c)| (d, j, c)));
        }
        head.key.push((BOS, nk, 1.0));
        Ok(head)
    }

    fn aggregate(&self, i: usize, selector: Ref, sop: Ref, big: f64) -> Result<Vec<Stage>, CompileError> {
        let src = self.seg_of(sop);
        let out = self.seg(SegmentOwner::Node(i));
        if self.kinds[i] != Some(ValueKind::Categorical) {
            if !self.narrow[i] {
                return Err(CompileError::Unsupported {
                    node: i,
                    reason: "numerical aggregate over a selector that may select several positions".into(),
                });
            }
            let mut head = self.select_head(selector, big, big / 2.0, 1)?;
            head.value.push((src.start, 0, 1.0));
            head.output.push((0, out.start, 1.0));
            return Ok(vec![Stage::Attn(head)]);
        }

        let n = src.len;
        let mut head = self.select_head(selector, big, big / 2.0, n)?;
        head.value.extend((0..n).map(|j| (src.start + j, j, 1.0)));
        let domain = src.values[0].domain();
        let default_dim = out.dim_of(&default_value(domain, self.rasp));
        // Fires when nothing was selected: `relu(one - 2 * sum(f))`.
        let default_unit = |frac: &Segment| {
            default_dim.map(|d| {
                let mut input: Lin = frac.dims().map(|k| (k, -2.0)).collect();
                input.push((ONE, 1.0));
                Unit { input, output: vec![(d, 1.0)] }
            })
        };

        if self.narrow[i] {
            // At most one key is selected, so the mean is already one-hot.
            head.output.extend(src.values.iter().enumerate().filter_map(|(j, v)| out.dim_of(v).map(|d| (j, d, 1.0))));
            let units: Vec<Unit> = default_unit(out).into_iter().collect();
            return Ok(vec![Stage::Attn(head), Stage::Mlp(units)]);
        }

        // Several keys may be selected: the attention writes value
        // frequencies, then two MLPs pick the most frequent value (smallest
        // on ties). Frequencies are multiples of 1/w for w <= max_seq_len, so
        // distinct frequencies differ by at least 1/max_seq_len.
        let frac = self.seg(SegmentOwner::Scratch { node: i, part: 0 });
        let loss = self.seg(SegmentOwner::Scratch { node: i, part: 1 });
        head.output.extend((0..n).map(|j| (j, frac.start + j, 1.0)));
        let l = self.rasp.max_seq_len as f64;
        let slope = 4.0 * l;
        let mut beats = Vec::new();
        for v in 0..n {
            for u in 0..n {
                if u == v {
                    continue;
                }
                // u beats v when f_u > f_v, or f_u == f_v and u is smaller.
                let t = if u < v { -0.5 / l } else { 0.5 / l };
                beats.push(Unit {
                    input: vec![(frac.start + u, slope), (frac.start + v, -slope), (ONE, -slope * t)],
                    output: vec![(loss.start + v, 1.0)],
                });
            }
        }
        let mut pick: Vec<Unit> = (0..n)
            .filter_map(|v| {
                let d = out.dim_of(&src.values[v])?;
                let mut input: Lin = frac.dims().map(|k| (k, 2.0)).collect();
                input.extend([(ONE, -1.0), (loss.start + v, -1.0)]);
                Some(Unit { input, output: vec![(d, 1.0)] })
            })
            .collect();
        pick.extend(default_unit(frac));
        Ok(vec![Stage::Attn(head), Stage::Mlp(beats), Stage::Mlp(pick)])
    }

    /// Attention to BOS and the selected keys writes `1 / (w + 1)`; an MLP
    /// turns that ratio back into a one-hot width.
    fn selector_width(&self, i: usize, selector: Ref, big: f64) -> Result<Vec<Stage>, CompileError> {
        let ratio = self.seg(SegmentOwner::Scratch { node: i, part: 0 }).start;
        let out = self.seg(SegmentOwner::Node(i));
        let mut head = self.select_head(selector, big, big, 1)?;
        head.value.push((BOS, 0, 1.0));
        head.output.push((0, ratio, 1.0));

        let dim = |w: usize| out.dim_of(&Value::num(w as f64));
        let max_w = out.values.iter().filter_map(Value::as_f64).fold(0.0, f64::max) as usize;
        // one-hot(w) = s_w - s_{w+1} with s_k = [w >= k] = [ratio <= 1/(k+1)].
        let mut units =
            vec![Unit { input: vec![(ONE, 1.0)], output: dim(0).map(|d| vec![(d, 1.0)]).unwrap_or_default() }];
        for k in 1..=max_w {
            let kf = k as f64;
            let mid = (1.0 / kf + 1.0 / (kf + 1.0)) / 2.0;
            let slope = 4.0 * kf * (kf + 1.0);
            let mut step: Lin = Vec::new();
            step.extend(dim(k).map(|d| (d, 1.0)));
            step.extend(dim(k - 1).map(|d| (d, -1.0)));
            let neg: Lin = step.iter().map(|&(d, c)| (d, -c)).collect();
            units.push(Unit { input: vec![(ONE, slope * mid), (ratio, -slope)], output: step });
            units.push(Unit { input: vec![(ONE, slope * mid - 1.0), (ratio, -slope)], output: neg });
        }
        Ok(vec![Stage::Attn(head), Stage::Mlp(units)])
    }

    /// Piecewise-constant MLP for `f` over the finite values of a numerical
    /// sequence: a constant plus one clamped step between each pair of
    /// neighbouring values.
    fn numeric_map(&self, i: usize, sop: Ref, f: impl Fn(Value) -> Value) -> Vec<Unit> {
        let x = self.seg_of(sop).start;
        let out = self.seg(SegmentOwner::Node(i)).start;
        let mut xs: Vec<f64> = Vec::new();
        for v in &self.specs.get(sop).expect("sequence operand").values {
            let v = v.as_f64().expect("numeric value");
            if xs.last().is_none_or(|&last| v - last > 1e-9) {
                xs.push(v);
            }
        }
        let ys: Vec<f64> = xs.iter().map(|&v| f(Value::num(v)).as_f64().expect("numeric value")).collect();
        let mut units = vec![Unit { input: vec![(ONE, 1.0)], output: vec![(out, ys[0])] }];
        let min_gap = xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let slope = 2.0 / min_gap;
        for k in 0..xs.len().saturating_sub(1) {
            let delta = ys[k + 1] - ys[k];
            if delta == 0.0 {
                continue;
            }
            let mid = (xs[k] + xs[k + 1]) / 2.0;
            units.push(Unit { input: vec![(x, slope), (ONE, 0.5 - slope * mid)], output: vec![(out, delta)] });
            units.push(Unit { input: vec![(x, slope), (ONE, -0.5 - slope * mid)], output: vec![(out, -delta)] });
        }
        units.retain(|u| u.output.iter().any(|&(_, c)| c != 0.0));
        units
    }

    fn assemble(self, stages: Vec<Vec<Stage>>) -> CompiledTransformer {
        let p = self.program;
        let d = self.layout.total_dim;
        // Slot of the last sublayer that contributes to each expression; -1
        // for values available right after the embedding.
        let mut ready = vec![-1i64; p.len()];
        let mut slots: Vec<Vec<i64>> = Vec::with_capacity(p.len());
        let mut placements = Vec::with_capacity(p.len());
        for (i, node) in p.nodes().iter().enumerate() {
            let dep = node.inputs().iter().map(|r| r.node().map_or(-1, |j| ready[j])).max().unwrap_or(-1);
            let mut slot = dep;
            let mut mine = Vec::new();
            for s in &stages[i] {
                slot += 1;
                if slot.rem_euclid(2) != s.parity() {
                    slot += 1;
                }
                mine.push(slot);
            }
            ready[i] = slot;
            placements.push(match (mine.first(), mine.last()) {
                (Some(&a), Some(&b)) => Some(Placement { first_slot: a as usize, last_slot: b as usize }),
                _ => None,
            });
            slots.push(mine);
        }
        let max_slot = slots.iter().flatten().copied().max().unwrap_or(-1);
        let n_layers = ((max_slot + 2) / 2) as usize;

        let mut matrices = self.embeddings();
        let mut heads: Vec<Vec<&Head>> = vec![Vec::new(); n_layers];
        let mut mlps: Vec<Vec<&Unit>> = vec![Vec::new(); n_layers];
        for (node_stages, node_slots) in stages.iter().zip(&slots) {
            for (s, &slot) in node_stages.iter().zip(node_slots) {
                let layer = (slot / 2) as usize;
                match s {
                    Stage::Attn(h) => heads[layer].push(h),
                    Stage::Mlp(units) => mlps[layer].extend(units),
                }
            }
        }
        for layer in 0..n_layers {
            for (h, head) in heads[layer].iter().enumerate() {
                let mut q = WeightMatrix::zeros(Role::Query, layer, Some(h), d, head.d_head);
                let mut k = WeightMatrix::zeros(Role::Key, layer, Some(h), d, head.d_head);
                let mut v = WeightMatrix::zeros(Role::Value, layer, Some(h), d, head.d_value);
                let mut o = WeightMatrix::zeros(Role::Output, layer, Some(h), head.d_value, d);
                for (m, entries) in
                    [(&mut q, &head.query), (&mut k, &head.key), (&mut v, &head.value), (&mut o, &head.output)]
                {
                    for &(r, c, x) in entries {
                        m.add(r, c, x);
                    }
                }
                matrices.extend([q, k, v, o]);
            }
            let units = &mlps[layer];
            if units.is_empty() {
                continue;
            }
            let mut w_in = WeightMatrix::zeros(Role::MlpIn, layer, None, d, units.len());
            let mut w_out = WeightMatrix::zeros(Role::MlpOut, layer, None, units.len(), d);
            for (h, u) in units.iter().enumerate() {
                // Every unit is silenced at BOS, keeping BOS free of
                // node values.
                let m = 1.0 + u.input.iter().map(|&(_, c)| c.abs()).sum::<f64>();
                for &(r, c) in &u.input {
                    w_in.add(r, h, c);
                }
                w_in.add(BOS, h, -m);
                for &(c, x) in &u.output {
                    w_out.add(h, c, x);
                }
            }
            matrices.extend([w_in, w_out]);
        }
        matrices.sort_by_key(WeightMatrix::order_key);
        CompiledTransformer {
            matrices,
            layout: self.layout,
            n_layers,
            source: p.clone(),
            config: self.rasp.clone(),
            placements,
        }
    }

    fn embeddings(&self) -> Vec<WeightMatrix> {
        let d = self.layout.total_dim;
        let vocab = self.rasp.vocab_size as usize;
        let len = self.rasp.max_seq_len;
        let tokens = self.seg(SegmentOwner::Tokens).start;
        let indices = self.seg(SegmentOwner::Indices).start;
        // Row 0 is the BOS token, row 1 + s the symbol s.
        let mut te = WeightMatrix::zeros(Role::TokenEmbed, 0, None, vocab + 1, d);
        te.add(0, BOS, 1.0);
        for s in 0..vocab {
            te.add(1 + s, tokens + s, 1.0);
        }
        // Row p is position p; position 0 holds BOS.
        let mut pe = WeightMatrix::zeros(Role::PosEmbed, 0, None, len + 1, d);
        for pos in 0..=len {
            pe.add(pos, ONE, 1.0);
            if pos > 0 {
                pe.add(pos, indices + pos - 1, 1.0);
            }
        }
        vec![te, pe]
    }
}
