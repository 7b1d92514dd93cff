use super::bn::{BlockStats, BnEntry, BnStats, VARIANCE_FLOOR};
use super::net::{GroupIds, LinearIds, ParamId, SdrNet};
use super::Target;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor2D;

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with calibrated statistics for the target.
    Eval,
}

#[derive(Clone, Copy)]
pub(crate) enum Norm<'a> {
    Batch { allow_single: bool },
    Stored(&'a BnEntry),
}

/// Block output split into its shared part and the active individual parts.
struct Segments {
    shared: Option<Tensor2D>,
    individual: Vec<Tensor2D>,
}

impl Segments {
    fn concat(&self) -> Result<Tensor2D> {
        let mut parts: Vec<&Tensor2D> = self.shared.iter().collect();
        parts.extend(&self.individual);
        Tensor2D::hcat(&parts)
    }

    /// `[shared | mean of individual parts]`.
    fn merged(&self) -> Result<Tensor2D> {
        let mut mean = self.individual[0].clone();
        for other in &self.individual[1..] {
            mean.add_assign(other)?;
        }
        mean.scale(1.0 / self.individual.len() as f64);
        self.with(&mean)
    }

    fn with_individual(&self, slot: usize) -> Result<Tensor2D> {
        self.with(&self.individual[slot])
    }

    fn with(&self, individual: &Tensor2D) -> Result<Tensor2D> {
        match &self.shared {
            Some(s) => Tensor2D::hcat(&[s, individual]),
            None => Ok(individual.clone()),
        }
    }
}

#[derive(Clone, Debug)]
struct GroupCache {
    ids: GroupIds,
    /// `None` for the shared group, else the position among active individual groups.
    slot: Option<usize>,
    input: Tensor2D,
    xhat: Tensor2D,
    inv_std: Vec<f64>,
    floored: Vec<bool>,
    out: Tensor2D,
}

#[derive(Clone, Debug)]
struct BlockCache {
    groups: Vec<GroupCache>,
}

#[derive(Clone, Debug)]
struct StackCache {
    inputs: Vec<Tensor2D>,
}

/// Everything backward needs from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    target: Target,
    version: u64,
    mode: Mode,
    batch: usize,
    stem_input: Option<Tensor2D>,
    blocks: Vec<BlockCache>,
    proj: StackCache,
    pred: StackCache,
}

impl ForwardCache {
    pub fn target(&self) -> &Target {
        &self.target
    }
}

pub struct ForwardOutput {
    /// Last block activation (`c_s + c_i` wide for a path, `c_s + g·c_i` for the full net).
    pub backbone: Tensor2D,
    /// Projection head output.
    pub z: Tensor2D,
    /// Prediction head output.
    pub p: Tensor2D,
    pub cache: ForwardCache,
}

/// Parameter gradients aligned with `subnet_params(target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub target: Target,
    pub entries: Vec<(ParamId, Tensor2D)>,
}

impl Gradients {
    /// Element-wise sum with another gradient set for the same target.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.target != other.target || self.entries.len() != other.entries.len() {
            return Err(shape_err("Gradients::accumulate", "gradients belong to different targets"));
        }
        for ((ia, a), (ib, b)) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(ia, ib);
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, g)| g.data().iter().copied()).collect()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor2D> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }
}

fn relu_in_place(t: &mut Tensor2D) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// `d ⊙ 1[mask > 0]`.
fn gate(d: &mut Tensor2D, mask: &Tensor2D) {
    for (g, &m) in d.data_mut().iter_mut().zip(mask.data()) {
        if m <= 0.0 {
            *g = 0.0;
        }
    }
}

struct GradSink {
    slots: Vec<Option<Tensor2D>>,
}

impl GradSink {
    fn add(&mut self, id: ParamId, g: Tensor2D) -> Result<()> {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

impl SdrNet {
    /// Runs `target` on `batch`.
    ///
    /// Train mode normalizes with batch statistics and needs at least two rows.
    /// Eval mode needs calibrated statistics for `target` in `bn`.
    pub fn forward(&self, target: &Target, batch: &Tensor2D, mode: Mode, bn: Option<&BnStats>) -> Result<ForwardOutput> {
        let norm = match mode {
            Mode::Train => Norm::Batch { allow_single: false },
            Mode::Eval => Norm::Stored(
                bn.and_then(|s| s.get(target))
                    .ok_or_else(|| Error::CalibrationRequired(target.to_string()))?,
            ),
        };
        let mut out = self.forward_with(target, batch, norm, None)?;
        out.cache.mode = mode;
        Ok(out)
    }

    pub(crate) fn forward_with(
        &self,
        target: &Target,
        batch: &Tensor2D,
        norm: Norm<'_>,
        mut collect: Option<&mut Vec<BlockStats>>,
    ) -> Result<ForwardOutput> {
        self.check_target(target)?;
        let cfg = self.config();
        if batch.cols() != cfg.input_dim {
            return Err(shape_err(
                "forward",
                format!("batch has {} columns, the net expects {}", batch.cols(), cfg.input_dim),
            ));
        }
        if batch.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if matches!(norm, Norm::Batch { allow_single: false }) && batch.rows() < 2 {
            return Err(shape_err("forward", "train-mode batch norm needs at least 2 rows"));
        }
        if let Norm::Stored(entry) = norm {
            if entry.blocks.len() != cfg.blocks {
                return Err(Error::CalibrationRequired(format!("{target} (stale statistics)")));
            }
        }

        let (x0, stem_input) = match self.layout.stem {
            Some(s) => {
                let mut h = batch.matmul(self.param(s.w))?;
                h.add_row_broadcast(self.param(s.b))?;
                (h, Some(batch.clone()))
            }
            None => (batch.clone(), None),
        };

        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut prev: Option<Segments> = None;
        for l in 0..cfg.blocks {
            let ids = &self.layout.blocks[l];
            let active = self.active_groups(target, l);
            let mut plan: Vec<(GroupIds, Option<usize>, Tensor2D)> = Vec::new();
            if let Some(s) = ids.shared {
                let input = match &prev {
                    Some(seg) => seg.merged()?,
                    None => x0.clone(),
                };
                plan.push((s, None, input));
            }
            for (slot, &j) in active.iter().enumerate() {
                let input = match &prev {
                    Some(seg) => seg.with_individual(slot)?,
                    None => x0.clone(),
                };
                plan.push((ids.individual[j], Some(slot), input));
            }

            let mut offset = 0;
            let mut groups = Vec::with_capacity(plan.len());
            let mut block_stats = BlockStats::default();
            for (gids, slot, input) in plan {
                let gc = self.group_forward(gids, slot, input, norm, l, offset, &mut block_stats)?;
                offset += gids.width;
                groups.push(gc);
            }
            if let Some(c) = collect.as_deref_mut() {
                c.push(block_stats);
            }
            prev = Some(Segments {
                shared: groups.iter().find(|g| g.slot.is_none()).map(|g| g.out.clone()),
                individual: groups.iter().filter(|g| g.slot.is_some()).map(|g| g.out.clone()).collect(),
            });
            blocks.push(BlockCache { groups });
        }

        let last = prev.expect("at least one block");
        let backbone = last.concat()?;
        let (z, proj) = self.stack_forward(&self.layout.proj, last.merged()?)?;
        let (p, pred) = self.stack_forward(&self.layout.pred, z.clone())?;
        Ok(ForwardOutput {
            backbone,
            z,
            p,
            cache: ForwardCache {
                target: target.clone(),
                version: self.version(),
                mode: Mode::Train,
                batch: batch.rows(),
                stem_input,
                blocks,
                proj,
                pred,
            },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn group_forward(
        &self,
        ids: GroupIds,
        slot: Option<usize>,
        input: Tensor2D,
        norm: Norm<'_>,
        block: usize,
        offset: usize,
        stats: &mut BlockStats,
    ) -> Result<GroupCache> {
        let mut h = input.matmul(self.param(ids.linear.w))?;
        h.add_row_broadcast(self.param(ids.linear.b))?;
        let (rows, width) = h.shape();

        let (mean, var): (Vec<f64>, Vec<f64>) = match norm {
            Norm::Batch { .. } => {
                let mean: Vec<f64> = h.sum_rows().data().iter().map(|s| s / rows as f64).collect();
                let mut var = vec![0.0; width];
                for r in h.iter_rows() {
                    for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
            Norm::Stored(entry) => {
                let s = &entry.blocks[block];
                if s.mean.len() < offset + width || s.var.len() < offset + width {
                    return Err(Error::CalibrationRequired("statistics narrower than the block".into()));
                }
                (
                    s.mean[offset..offset + width].to_vec(),
                    s.var[offset..offset + width].to_vec(),
                )
            }
        };
        let floored: Vec<bool> = var.iter().map(|&v| v < VARIANCE_FLOOR).collect();
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(VARIANCE_FLOOR).sqrt()).collect();
        stats.mean.extend_from_slice(&mean);
        stats.var.extend_from_slice(&var);

        let mut xhat = h;
        for r in 0..rows {
            for ((x, m), s) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - m) * s;
            }
        }
        let mut out = xhat.clone();
        if let Some(bn) = ids.bn {
            let scale = self.param(bn.scale).data();
            let shift = self.param(bn.shift).data();
            for r in 0..rows {
                for ((y, a), b) in out.row_mut(r).iter_mut().zip(scale).zip(shift) {
                    *y = *y * a + b;
                }
            }
        }
        relu_in_place(&mut out);
        Ok(GroupCache {
            ids,
            slot,
            input,
            xhat,
            inv_std,
            floored,
            out,
        })
    }

    fn stack_forward(&self, layers: &[LinearIds], x: Tensor2D) -> Result<(Tensor2D, StackCache)> {
        let mut inputs = Vec::with_capacity(layers.len());
        let mut cur = x;
        for (i, ids) in layers.iter().enumerate() {
            let mut h = cur.matmul(self.param(ids.w))?;
            h.add_row_broadcast(self.param(ids.b))?;
            if i + 1 < layers.len() {
                relu_in_place(&mut h);
            }
            inputs.push(std::mem::replace(&mut cur, h));
        }
        Ok((cur, StackCache { inputs }))
    }

    fn stack_backward(&self, layers: &[LinearIds], cache: &StackCache, d_out: Tensor2D, sink: &mut GradSink) -> Result<Tensor2D> {
        let mut d = d_out;
        for i in (0..layers.len()).rev() {
            if i + 1 < layers.len() {
                gate(&mut d, &cache.inputs[i + 1]);
            }
            let ids = layers[i];
            sink.add(ids.w, cache.inputs[i].matmul_tn(&d)?)?;
            sink.add(ids.b, d.sum_rows())?;
            d = d.matmul_nt(self.param(ids.w))?;
        }
        Ok(d)
    }

    /// Returns `(d_input)` and records parameter gradients of one group.
    fn group_backward(&self, gc: &GroupCache, d_out: &Tensor2D, sink: &mut GradSink) -> Result<Tensor2D> {
        let rows = gc.out.rows() as f64;
        let mut dy = d_out.clone();
        gate(&mut dy, &gc.out);
        let mut dxhat = dy.clone();
        if let Some(bn) = gc.ids.bn {
            let mut prod = dy.clone();
            for (p, x) in prod.data_mut().iter_mut().zip(gc.xhat.data()) {
                *p *= x;
            }
            sink.add(bn.scale, prod.sum_rows())?;
            sink.add(bn.shift, dy.sum_rows())?;
            let scale = self.param(bn.scale).data();
            for r in 0..dxhat.rows() {
                for (v, a) in dxhat.row_mut(r).iter_mut().zip(scale) {
                    *v *= a;
                }
            }
        }
        let width = dxhat.cols();
        let mut mean_d = vec![0.0; width];
        let mut mean_dx = vec![0.0; width];
        for (dr, xr) in dxhat.iter_rows().zip(gc.xhat.iter_rows()) {
            for c in 0..width {
                mean_d[c] += dr[c];
                mean_dx[c] += dr[c] * xr[c];
            }
        }
        mean_d.iter_mut().for_each(|v| *v /= rows);
        mean_dx.iter_mut().for_each(|v| *v /= rows);
        let mut dh = dxhat;
        for r in 0..dh.rows() {
            let xr = gc.xhat.row(r);
            for (c, v) in dh.row_mut(r).iter_mut().enumerate() {
                let var_term = if gc.floored[c] { 0.0 } else { xr[c] * mean_dx[c] };
                *v = gc.inv_std[c] * (*v - mean_d[c] - var_term);
            }
        }
        sink.add(gc.ids.linear.w, gc.input.matmul_tn(&dh)?)?;
        sink.add(gc.ids.linear.b, dh.sum_rows())?;
        dh.matmul_nt(self.param(gc.ids.linear.w))
    }

    /// Back-propagates upstream gradients on `z` and `p` through a train-mode
    /// forward pass. Only parameters of the cached target receive gradients.
    pub fn backward(&self, cache: &ForwardCache, dz: &Tensor2D, dp: &Tensor2D) -> Result<Gradients> {
        if cache.version != self.version() {
            return Err(Error::StaleCache("weights changed since the forward pass"));
        }
        if cache.mode != Mode::Train {
            return Err(Error::StaleCache("backward needs a train-mode forward pass"));
        }
        let cfg = self.config();
        let pw = cfg.projection_width();
        if dz.shape() != (cache.batch, pw) || dp.shape() != (cache.batch, pw) {
            return Err(shape_err(
                "backward",
                format!("upstream gradients {:?}, {:?} for outputs {:?}", dz.shape(), dp.shape(), (cache.batch, pw)),
            ));
        }
        let mut sink = GradSink {
            slots: vec![None; self.params().len()],
        };

        let mut d_z = self.stack_backward(&self.layout.pred, &cache.pred, dp.clone(), &mut sink)?;
        d_z.add_assign(dz)?;
        let d_head = self.stack_backward(&self.layout.proj, &cache.proj, d_z, &mut sink)?;

        let cs = cfg.shared_width;
        let ci = cfg.individual_width;
        let b = cache.batch;
        let active = cache.blocks[0].groups.iter().filter(|g| g.slot.is_some()).count();

        // Gradient on each segment of the current block's output.
        let mut d_shared = Tensor2D::zeros(b, cs);
        let mut d_ind = vec![Tensor2D::zeros(b, ci); active];
        route_merged(&d_head, cs, &mut d_shared, &mut d_ind)?;

        let mut d_x0 = cache.stem_input.as_ref().map(|_| Tensor2D::zeros(b, cfg.block_input_width(0)));
        for (l, block) in cache.blocks.iter().enumerate().rev() {
            let mut next_shared = Tensor2D::zeros(b, cs);
            let mut next_ind = vec![Tensor2D::zeros(b, ci); active];
            for gc in &block.groups {
                let d_out = match gc.slot {
                    None => &d_shared,
                    Some(t) => &d_ind[t],
                };
                let d_in = self.group_backward(gc, d_out, &mut sink)?;
                if l == 0 {
                    if let Some(acc) = d_x0.as_mut() {
                        acc.add_assign(&d_in)?;
                    }
                    continue;
                }
                match gc.slot {
                    None => route_merged(&d_in, cs, &mut next_shared, &mut next_ind)?,
                    Some(t) => {
                        next_shared.add_assign(&d_in.slice_cols(0..cs))?;
                        next_ind[t].add_assign(&d_in.slice_cols(cs..cs + ci))?;
                    }
                }
            }
            d_shared = next_shared;
            d_ind = next_ind;
        }
        if let (Some(stem), Some(x), Some(d)) = (self.layout.stem, &cache.stem_input, d_x0) {
            sink.add(stem.w, x.matmul_tn(&d)?)?;
            sink.add(stem.b, d.sum_rows())?;
        }

        let ids = self.subnet_params(&cache.target)?;
        let entries = ids
            .into_iter()
            .map(|id| {
                let g = sink.slots[id.0].take().unwrap_or_else(|| {
                    let p = self.param(id);
                    Tensor2D::zeros(p.rows(), p.cols())
                });
                (id, g)
            })
            .collect();
        Ok(Gradients {
            target: cache.target.clone(),
            entries,
        })
    }
}

/// Splits a gradient on `[shared | mean_t individual_t]` back onto the segments.
fn route_merged(d: &Tensor2D, cs: usize, d_shared: &mut Tensor2D, d_ind: &mut [Tensor2D]) -> Result<()> {
    d_shared.add_assign(&d.slice_cols(0..cs))?;
    let share = d.slice_cols(cs..d.cols());
    let w = 1.0 / d_ind.len() as f64;
    for t in d_ind.iter_mut() {
        t.axpy(w, &share)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Rng};
    use crate::sdrnet::{all_paths, tests::toy_config, NetConfig, PathCode};
    use proptest::prelude::*;

    fn deep_config(groups: usize, blocks: usize) -> NetConfig {
        NetConfig {
            input_dim: 5,
            blocks,
            groups,
            shared_width: 3,
            individual_width: 2,
            stem_width: Some(4),
            proj_dims: vec![6, 4],
            pred_dims: vec![3, 4],
            bn_affine: true,
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2D {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor2D::from_vec(rows, cols, data).unwrap()
    }

    fn path(digits: &[usize], g: usize) -> Target {
        Target::Path(PathCode::new(digits.to_vec(), g).unwrap())
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let net = SdrNet::zeros(toy_config()).unwrap();
        let x = random(4, 4, &mut Rng::new(1));
        let out = net.forward(&Target::Full, &x, Mode::Train, None).unwrap();
        assert!(out.z.data().iter().all(|&v| v == 0.0));
        assert!(out.p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes() {
        let cfg = deep_config(2, 3);
        let net = SdrNet::new(cfg.clone(), &mut Rng::new(2)).unwrap();
        let x = random(7, 5, &mut Rng::new(3));
        let full = net.forward(&Target::Full, &x, Mode::Train, None).unwrap();
        assert_eq!(full.backbone.shape(), (7, 3 + 2 * 2));
        assert_eq!(full.z.shape(), (7, 4));
        assert_eq!(full.p.shape(), (7, 4));
        let sub = net.forward(&path(&[1, 0, 1], 2), &x, Mode::Train, None).unwrap();
        assert_eq!(sub.backbone.shape(), (7, 5));
    }

    #[test]
    fn single_group_full_matches_path_bitwise() {
        let net = SdrNet::new(deep_config(1, 3), &mut Rng::new(4)).unwrap();
        let x = random(6, 5, &mut Rng::new(5));
        let a = net.forward(&Target::Full, &x, Mode::Train, None).unwrap();
        let b = net.forward(&Target::Path(PathCode::zeros(3)), &x, Mode::Train, None).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.z, b.z);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = SdrNet::new(deep_config(2, 2), &mut Rng::new(6)).unwrap();
        let x = random(1, 5, &mut Rng::new(7));
        assert!(net.forward(&Target::Full, &x, Mode::Train, None).is_err());
        let wide = random(3, 6, &mut Rng::new(7));
        assert!(net.forward(&Target::Full, &wide, Mode::Train, None).is_err());
        let ok = random(3, 5, &mut Rng::new(7));
        assert!(matches!(
            net.forward(&Target::Full, &ok, Mode::Eval, None),
            Err(Error::CalibrationRequired(_))
        ));
        assert!(net.forward(&path(&[0, 0, 0], 2), &ok, Mode::Train, None).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = SdrNet::new(deep_config(2, 2), &mut Rng::new(8)).unwrap();
        let x = random(5, 5, &mut Rng::new(9));
        let out = net.forward(&Target::Full, &x, Mode::Train, None).unwrap();
        let zero = Tensor2D::zeros(5, 4);
        let g = net.backward(&out.cache, &zero, &zero).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut net = SdrNet::new(deep_config(2, 1), &mut Rng::new(10)).unwrap();
        let x = random(4, 5, &mut Rng::new(11));
        let out = net.forward(&Target::Full, &x, Mode::Train, None).unwrap();
        let id = net.find("proj.0.b").unwrap();
        net.set_param(id, Tensor2D::filled(1, 6, 0.5)).unwrap();
        let d = Tensor2D::zeros(4, 4);
        assert!(matches!(net.backward(&out.cache, &d, &d), Err(Error::StaleCache(_))));
    }

    fn check_gradients(cfg: NetConfig, target: Target, seed: u64) {
        let mut rng = Rng::new(seed);
        let net = SdrNet::new(cfg.clone(), &mut rng).unwrap();
        let x = random(6, cfg.input_dim, &mut rng);
        let pw = cfg.projection_width();
        let dz = random(6, pw, &mut rng);
        let dp = random(6, pw, &mut rng);
        let out = net.forward(&target, &x, Mode::Train, None).unwrap();
        let analytic = net.backward(&out.cache, &dz, &dp).unwrap().flat();
        let base = net.view_flat(&target).unwrap();
        let numeric = finite_diff_grad(
            |w| {
                let mut probe = net.clone();
                probe.set_view_flat(&target, w).unwrap();
                let o = probe.forward(&target, &x, Mode::Train, None).unwrap();
                let lin = |a: &Tensor2D, b: &Tensor2D| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
                lin(&o.z, &dz) + lin(&o.p, &dp)
            },
            &base,
            1e-6,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "{target}: relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(deep_config(2, 2), Target::Full, 20);
        check_gradients(deep_config(2, 2), path(&[1, 0], 2), 21);
        check_gradients(deep_config(3, 1), Target::Full, 22);
        check_gradients(NetConfig { bn_affine: false, stem_width: None, ..deep_config(2, 3) }, path(&[0, 1, 1], 2), 23);
        check_gradients(NetConfig { shared_width: 0, ..deep_config(2, 2) }, Target::Full, 24);
    }

    #[test]
    fn path_gradients_touch_only_its_view() {
        let cfg = deep_config(2, 2);
        let net = SdrNet::new(cfg, &mut Rng::new(30)).unwrap();
        let x = random(5, 5, &mut Rng::new(31));
        let t = path(&[0, 1], 2);
        let out = net.forward(&t, &x, Mode::Train, None).unwrap();
        let d = random(5, 4, &mut Rng::new(32));
        let g = net.backward(&out.cache, &d, &d).unwrap();
        let names: Vec<&str> = g.entries.iter().map(|(id, _)| net.name(*id)).collect();
        assert!(names.contains(&"block0.ind0.w"));
        assert!(names.contains(&"block1.ind1.w"));
        assert!(!names.contains(&"block0.ind1.w"));
        assert!(!names.contains(&"block1.ind0.w"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn isolation_under_sgd(g in 1usize..4, l in 1usize..4, seed in 0u64..1000, pick in 0usize..64) {
            use crate::numerics::SgdConfig;
            let cfg = deep_config(g, l);
            let mut net = SdrNet::new(cfg.clone(), &mut Rng::new(seed)).unwrap();
            let paths = all_paths(g, l).unwrap();
            let t = Target::Path(paths[pick % paths.len()].clone());
            let before = net.clone();
            let x = random(4, 5, &mut Rng::new(seed + 1));
            let out = net.forward(&t, &x, Mode::Train, None).unwrap();
            let d = random(4, 4, &mut Rng::new(seed + 2));
            let grads = net.backward(&out.cache, &d, &d).unwrap();
            let mut opt = net.optimizer(SgdConfig::new(0.1, 0.9, 1e-4).unwrap());
            net.apply_gradients(&grads, &mut opt).unwrap();
            let view: std::collections::BTreeSet<_> = net.subnet_params(&t).unwrap().into_iter().collect();
            for i in 0..net.params().len() {
                let id = ParamId(i);
                if !view.contains(&id) {
                    prop_assert_eq!(net.param(id), before.param(id));
                }
            }
            let out = net.forward(&t, &x, Mode::Train, None).unwrap();
            prop_assert!(out.z.is_finite());
        }
    }
}
