use super::{NetConfig, PathCode, Target};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Rng, SgdState, Tensor2D};

/// Index of a parameter tensor inside an [`SdrNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AffineIds {
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GroupIds {
    pub linear: LinearIds,
    pub bn: Option<AffineIds>,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub shared: Option<GroupIds>,
    pub individual: Vec<GroupIds>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub stem: Option<LinearIds>,
    pub blocks: Vec<BlockIds>,
    pub proj: Vec<LinearIds>,
    pub pred: Vec<LinearIds>,
}

struct Builder {
    shapes: Vec<(String, usize, usize)>,
}

impl Builder {
    fn push(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.shapes.push((name, rows, cols));
        ParamId(self.shapes.len() - 1)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, width: usize) -> LinearIds {
        LinearIds {
            w: self.push(format!("{prefix}.w"), fan_in, width),
            b: self.push(format!("{prefix}.b"), 1, width),
        }
    }

    fn group(&mut self, l: usize, tag: &str, fan_in: usize, width: usize, affine: bool) -> GroupIds {
        let linear = self.linear(&format!("block{l}.{tag}"), fan_in, width);
        let bn = affine.then(|| AffineIds {
            scale: self.push(format!("block{l}.bn.{tag}.scale"), 1, width),
            shift: self.push(format!("block{l}.bn.{tag}.shift"), 1, width),
        });
        GroupIds { linear, bn, width }
    }
}

fn build_layout(cfg: &NetConfig) -> (Layout, Vec<(String, usize, usize)>) {
    let mut b = Builder { shapes: Vec::new() };
    let stem = cfg.stem_width.map(|w| b.linear("stem", cfg.input_dim, w));
    let blocks = (0..cfg.blocks)
        .map(|l| {
            let fan_in = cfg.block_input_width(l);
            let shared = (cfg.shared_width > 0)
                .then(|| b.group(l, "shared", fan_in, cfg.shared_width, cfg.bn_affine));
            let individual = (0..cfg.groups)
                .map(|j| b.group(l, &format!("ind{j}"), fan_in, cfg.individual_width, cfg.bn_affine))
                .collect();
            BlockIds { shared, individual }
        })
        .collect();
    let mut prev = cfg.subnet_width();
    let mut head = |name: &str, dims: &[usize], prev: &mut usize| -> Vec<LinearIds> {
        dims.iter()
            .enumerate()
            .map(|(i, &w)| {
                let ids = b.linear(&format!("{name}.{i}"), *prev, w);
                *prev = w;
                ids
            })
            .collect()
    };
    let proj = head("proj", &cfg.proj_dims, &mut prev);
    let pred = head("pred", &cfg.pred_dims, &mut prev);
    (Layout { stem, blocks, proj, pred }, b.shapes)
}

/// Parameters of the full network `W_0`; sub-nets are index views into it.
#[derive(Clone, Debug)]
pub struct SdrNet {
    config: NetConfig,
    pub(crate) layout: Layout,
    params: Vec<Tensor2D>,
    names: Vec<String>,
    /// Bumped on every mutation; forward caches remember the value they saw.
    version: u64,
}

impl PartialEq for SdrNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl SdrNet {
    /// Randomly initialized net: weights uniform in `±√(6/fan_in)`, biases and
    /// shifts zero, scales one.
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for (p, name) in net.params.iter_mut().zip(&net.names) {
            if name.ends_with(".w") {
                let bound = (6.0 / p.rows() as f64).sqrt();
                p.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.uniform_range(-bound, bound));
            } else if name.ends_with(".scale") {
                p.data_mut().iter_mut().for_each(|v| *v = 1.0);
            }
        }
        Ok(net)
    }

    /// Net with every parameter zero.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = build_layout(&config);
        let (names, params) = shapes
            .into_iter()
            .map(|(n, r, c)| (n, Tensor2D::zeros(r, c)))
            .unzip();
        Ok(Self {
            config,
            layout,
            params,
            names,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor2D] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    /// Replaces one tensor; shape must match.
    pub fn set_param(&mut self, id: ParamId, value: Tensor2D) -> Result<()> {
        let slot = self
            .params
            .get_mut(id.0)
            .ok_or_else(|| shape_err("set_param", format!("no parameter {}", id.0)))?;
        if !slot.same_shape(&value) {
            return Err(shape_err(
                "set_param",
                format!("{}: {:?} vs {:?}", self.names[id.0], slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        self.version += 1;
        Ok(())
    }

    pub(crate) fn check_target(&self, target: &Target) -> Result<()> {
        if let Target::Path(p) = target {
            if p.len() != self.config.blocks {
                return Err(Error::InvalidPath(format!(
                    "path has {} digits but the net has {} blocks",
                    p.len(),
                    self.config.blocks
                )));
            }
            PathCode::new(p.digits().to_vec(), self.config.groups)?;
        }
        Ok(())
    }

    /// Indices of the groups `target` activates in block `l`.
    pub(crate) fn active_groups(&self, target: &Target, l: usize) -> Vec<usize> {
        match target {
            Target::Full => (0..self.config.groups).collect(),
            Target::Path(p) => vec![p.digits()[l]],
        }
    }

    /// The parameters `W_i` of `target`, in canonical order. No copies are made.
    pub fn subnet_params(&self, target: &Target) -> Result<Vec<ParamId>> {
        self.check_target(target)?;
        let mut ids = Vec::new();
        let push_group = |ids: &mut Vec<ParamId>, g: &GroupIds| {
            ids.extend([g.linear.w, g.linear.b]);
            if let Some(bn) = g.bn {
                ids.extend([bn.scale, bn.shift]);
            }
        };
        if let Some(s) = self.layout.stem {
            ids.extend([s.w, s.b]);
        }
        for (l, block) in self.layout.blocks.iter().enumerate() {
            if let Some(s) = &block.shared {
                push_group(&mut ids, s);
            }
            for j in self.active_groups(target, l) {
                push_group(&mut ids, &block.individual[j]);
            }
        }
        for h in self.layout.proj.iter().chain(&self.layout.pred) {
            ids.extend([h.w, h.b]);
        }
        Ok(ids)
    }

    /// Number of scalar parameters in `target`'s view.
    pub fn param_count(&self, target: &Target) -> Result<usize> {
        Ok(self
            .subnet_params(target)?
            .iter()
            .map(|id| self.params[id.0].len())
            .sum())
    }

    /// Concatenated values of `target`'s view.
    pub fn view_flat(&self, target: &Target) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for id in self.subnet_params(target)? {
            out.extend_from_slice(self.params[id.0].data());
        }
        Ok(out)
    }

    /// Writes `values` back through `target`'s view.
    pub fn set_view_flat(&mut self, target: &Target, values: &[f64]) -> Result<()> {
        let ids = self.subnet_params(target)?;
        let total: usize = ids.iter().map(|id| self.params[id.0].len()).sum();
        if total != values.len() {
            return Err(shape_err(
                "set_view_flat",
                format!("{} values for a view of {total}", values.len()),
            ));
        }
        let mut off = 0;
        for id in ids {
            let p = &mut self.params[id.0];
            let n = p.len();
            p.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Fresh optimizer state covering every parameter of the full net.
    pub fn optimizer(&self, config: crate::numerics::SgdConfig) -> SgdState {
        SgdState::new(config, &self.params)
    }

    /// Applies one SGD step to exactly the parameters present in `grads`.
    pub fn apply_gradients(&mut self, grads: &super::Gradients, state: &mut SgdState) -> Result<()> {
        for (id, g) in &grads.entries {
            state.step_one(id.0, &mut self.params[id.0], g)?;
        }
        self.version += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdrnet::{all_paths, tests::toy_config};
    use std::collections::BTreeSet;

    fn two_by_two() -> NetConfig {
        NetConfig {
            input_dim: 3,
            blocks: 2,
            groups: 2,
            shared_width: 2,
            individual_width: 2,
            stem_width: Some(3),
            proj_dims: vec![4, 3],
            pred_dims: vec![2, 3],
            bn_affine: true,
        }
    }

    #[test]
    fn naming_scheme() {
        let net = SdrNet::zeros(two_by_two()).unwrap();
        for name in [
            "stem.w",
            "block0.shared.w",
            "block1.ind1.b",
            "block0.bn.shared.scale",
            "block1.bn.ind0.shift",
            "proj.0.w",
            "proj.1.b",
            "pred.0.w",
            "pred.1.b",
        ] {
            assert!(net.find(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn counts_match_formulas() {
        for cfg in [toy_config(), two_by_two()] {
            let net = SdrNet::zeros(cfg.clone()).unwrap();
            assert_eq!(net.param_count(&Target::Full).unwrap(), cfg.param_count(&Target::Full));
            assert_eq!(net.params().iter().map(Tensor2D::len).sum::<usize>(), cfg.param_count(&Target::Full));
            for p in all_paths(cfg.groups, cfg.blocks).unwrap() {
                let t = Target::Path(p);
                assert_eq!(net.param_count(&t).unwrap(), cfg.param_count(&t));
            }
        }
    }

    #[test]
    fn view_intersection() {
        let net = SdrNet::zeros(two_by_two()).unwrap();
        let a: BTreeSet<_> = net
            .subnet_params(&Target::Path(PathCode::new(vec![0, 0], 2).unwrap()))
            .unwrap()
            .into_iter()
            .collect();
        let b: BTreeSet<_> = net
            .subnet_params(&Target::Path(PathCode::new(vec![0, 1], 2).unwrap()))
            .unwrap()
            .into_iter()
            .collect();
        let mut names: Vec<&str> = a.intersection(&b).map(|&id| net.name(id)).collect();
        names.sort_unstable();
        let mut expected = vec![
            "stem.w", "stem.b",
            "block0.shared.w", "block0.shared.b", "block0.bn.shared.scale", "block0.bn.shared.shift",
            "block1.shared.w", "block1.shared.b", "block1.bn.shared.scale", "block1.bn.shared.shift",
            "block0.ind0.w", "block0.ind0.b", "block0.bn.ind0.scale", "block0.bn.ind0.shift",
            "proj.0.w", "proj.0.b", "proj.1.w", "proj.1.b",
            "pred.0.w", "pred.0.b", "pred.1.w", "pred.1.b",
        ];
        expected.sort_unstable();
        assert_eq!(names, expected);
    }

    #[test]
    fn union_of_paths_is_everything() {
        let net = SdrNet::zeros(two_by_two()).unwrap();
        let mut all = BTreeSet::new();
        for p in all_paths(2, 2).unwrap() {
            all.extend(net.subnet_params(&Target::Path(p)).unwrap());
        }
        assert_eq!(all.len(), net.params().len());
        assert_eq!(
            net.subnet_params(&Target::Full).unwrap(),
            (0..net.params().len()).map(ParamId).collect::<Vec<_>>()
        );
    }

    #[test]
    fn views_alias_the_same_storage() {
        let mut net = SdrNet::zeros(two_by_two()).unwrap();
        let p00 = Target::Path(PathCode::new(vec![0, 0], 2).unwrap());
        let p01 = Target::Path(PathCode::new(vec![0, 1], 2).unwrap());
        let mut flat = net.view_flat(&p00).unwrap();
        flat.iter_mut().for_each(|v| *v = 7.0);
        net.set_view_flat(&p00, &flat).unwrap();
        let shared = net.find("block0.shared.w").unwrap();
        let pos = net.subnet_params(&p01).unwrap().iter().position(|&id| id == shared).unwrap();
        assert!(pos < net.subnet_params(&p01).unwrap().len());
        assert!(net.param(shared).data().iter().all(|&v| v == 7.0));
        assert!(net.param(net.find("block1.ind1.w").unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_paths_are_rejected() {
        let net = SdrNet::zeros(two_by_two()).unwrap();
        assert!(net.subnet_params(&Target::Path(PathCode::zeros(3))).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = SdrNet::new(two_by_two(), &mut Rng::new(9)).unwrap();
        let b = SdrNet::new(two_by_two(), &mut Rng::new(9)).unwrap();
        let c = SdrNet::new(two_by_two(), &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.param(a.find("block1.shared.w").unwrap());
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
}
