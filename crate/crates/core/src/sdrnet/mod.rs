//! Weight-sharing network with `g^L` routable sub-nets.
//!
//! Each of the `L` blocks owns one shared channel group (width `c_s`, may be
//! zero) and `g` individual groups (width `c_i`). A path picks one individual
//! group per block; the sub-net for that path is the stem, every shared group,
//! the chosen individual groups and the two heads. The full net uses every
//! group.
//!
//! Cross-block wiring: an individual group's weights are sized for the sub-net
//! input `[shared | one individual]`. In the full net, individual group `j`
//! of block `l` reads `[shared | individual_j]` from block `l-1`, while the
//! shared group reads `[shared | mean_j individual_j]`. The heads read the same
//! merged form of the last block. With `g = 1` both reductions are the
//! identity, so the full net and its only path compute identical bits.

mod bn;
mod forward;
mod net;

pub use bn::{bn_calibrate, BlockStats, BnEntry, BnStats, VARIANCE_FLOOR};
pub use forward::{ForwardCache, ForwardOutput, Gradients, Mode};
pub use net::{ParamId, SdrNet};

use std::fmt;

use crate::error::{Error, Result};

/// Network shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Number of SDR blocks `L`.
    pub blocks: usize,
    /// Individual groups per block `g`.
    pub groups: usize,
    pub shared_width: usize,
    pub individual_width: usize,
    /// Optional linear input projection shared by every sub-net.
    pub stem_width: Option<usize>,
    /// Layer widths of the projection head; empty means identity.
    pub proj_dims: Vec<usize>,
    /// Layer widths of the prediction head; the last must equal the projection width.
    pub pred_dims: Vec<usize>,
    /// Learnable per-channel scale and shift after normalization.
    pub bn_affine: bool,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.blocks == 0 || self.groups == 0 {
            return bad(format!("need L >= 1 and g >= 1, got L = {}, g = {}", self.blocks, self.groups));
        }
        if self.individual_width == 0 {
            return bad("individual_width must be >= 1".into());
        }
        if self.stem_width == Some(0) {
            return bad("stem width must be >= 1 when present".into());
        }
        if self.proj_dims.contains(&0) || self.pred_dims.contains(&0) {
            return bad("head widths must be >= 1".into());
        }
        if let Some(&last) = self.pred_dims.last() {
            if last != self.projection_width() {
                return bad(format!(
                    "prediction head ends at width {last} but the projection has width {}",
                    self.projection_width()
                ));
            }
        }
        if self.path_count().is_none() {
            return bad(format!("g^L = {}^{} overflows", self.groups, self.blocks));
        }
        Ok(())
    }

    /// `g^L`, or `None` on overflow.
    pub fn path_count(&self) -> Option<usize> {
        u32::try_from(self.blocks)
            .ok()
            .and_then(|l| self.groups.checked_pow(l))
    }

    /// Width a sub-net sees at every block output (`c_s + c_i`).
    pub fn subnet_width(&self) -> usize {
        self.shared_width + self.individual_width
    }

    /// Input width of block `l`.
    pub fn block_input_width(&self, l: usize) -> usize {
        if l == 0 {
            self.stem_width.unwrap_or(self.input_dim)
        } else {
            self.subnet_width()
        }
    }

    /// Output width of each projection; also the prediction output width.
    pub fn projection_width(&self) -> usize {
        self.proj_dims.last().copied().unwrap_or(self.subnet_width())
    }

    /// Width of the backbone representation produced for `target`.
    pub fn backbone_width(&self, target: &Target) -> usize {
        match target {
            Target::Full => self.full_net_width()[self.blocks - 1],
            Target::Path(_) => self.subnet_width(),
        }
    }

    /// Per-block output widths of the full net (`c_s + g·c_i`).
    pub fn full_net_width(&self) -> Vec<usize> {
        vec![self.shared_width + self.groups * self.individual_width; self.blocks]
    }

    /// Exact parameter count of `target`, from the width formulas.
    pub fn param_count(&self, target: &Target) -> usize {
        let linear = |i: usize, o: usize| i * o + o;
        let group = |i: usize, c: usize| linear(i, c) + if self.bn_affine { 2 * c } else { 0 };
        let individual_groups = match target {
            Target::Full => self.groups,
            Target::Path(_) => 1,
        };
        let mut total = self.stem_width.map_or(0, |w| linear(self.input_dim, w));
        for l in 0..self.blocks {
            let i = self.block_input_width(l);
            if self.shared_width > 0 {
                total += group(i, self.shared_width);
            }
            total += individual_groups * group(i, self.individual_width);
        }
        let mut prev = self.subnet_width();
        for &w in &self.proj_dims {
            total += linear(prev, w);
            prev = w;
        }
        for &w in &self.pred_dims {
            total += linear(prev, w);
            prev = w;
        }
        total
    }

    pub fn to_metadata(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("net.input_dim".into(), self.input_dim.to_string()),
            ("net.blocks".into(), self.blocks.to_string()),
            ("net.groups".into(), self.groups.to_string()),
            ("net.shared_width".into(), self.shared_width.to_string()),
            ("net.individual_width".into(), self.individual_width.to_string()),
            ("net.stem_width".into(), self.stem_width.unwrap_or(0).to_string()),
            ("net.proj_dims".into(), list(&self.proj_dims)),
            ("net.pred_dims".into(), list(&self.pred_dims)),
            ("net.bn_affine".into(), self.bn_affine.to_string()),
        ]
    }

    pub fn from_metadata(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("metadata lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("metadata {key} is not a count")))
        };
        let list = |key: &str| -> Result<Vec<usize>> {
            let raw = get(key)?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("metadata {key} is not a width list"))))
                .collect()
        };
        let stem = num("net.stem_width")?;
        let cfg = Self {
            input_dim: num("net.input_dim")?,
            blocks: num("net.blocks")?,
            groups: num("net.groups")?,
            shared_width: num("net.shared_width")?,
            individual_width: num("net.individual_width")?,
            stem_width: (stem > 0).then_some(stem),
            proj_dims: list("net.proj_dims")?,
            pred_dims: list("net.pred_dims")?,
            bn_affine: get("net.bn_affine")?
                .parse()
                .map_err(|_| Error::Format("metadata net.bn_affine is not a bool".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One individual-group choice per block; block 0 is the most significant digit.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PathCode {
    digits: Vec<usize>,
}

impl PathCode {
    pub fn new(digits: Vec<usize>, g: usize) -> Result<Self> {
        if let Some((l, &d)) = digits.iter().enumerate().find(|(_, &d)| d >= g) {
            return Err(Error::InvalidPath(format!("digit {d} at block {l} is outside [0, {g})")));
        }
        if digits.is_empty() {
            return Err(Error::InvalidPath("a path needs at least one block".into()));
        }
        Ok(Self { digits })
    }

    /// The all-zero path of length `blocks`.
    pub fn zeros(blocks: usize) -> Self {
        Self { digits: vec![0; blocks] }
    }

    pub fn digits(&self) -> &[usize] {
        &self.digits
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    /// Base-`g` positional value.
    pub fn index(&self, g: usize) -> Result<usize> {
        path_index(self, g)
    }

    /// Comma-separated digits, e.g. `0,1,1`.
    pub fn digit_string(&self) -> String {
        self.digits.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// `Σ_l digits[l] · g^(L−1−l)`.
pub fn path_index(path: &PathCode, g: usize) -> Result<usize> {
    let mut index: usize = 0;
    for (l, &d) in path.digits.iter().enumerate() {
        if d >= g {
            return Err(Error::InvalidPath(format!("digit {d} at block {l} is outside [0, {g})")));
        }
        index = index
            .checked_mul(g)
            .and_then(|v| v.checked_add(d))
            .ok_or_else(|| Error::InvalidPath("path index overflows".into()))?;
    }
    Ok(index)
}

/// Inverse of [`path_index`].
pub fn path_decode(index: usize, g: usize, blocks: usize) -> Result<PathCode> {
    if g == 0 || blocks == 0 {
        return Err(Error::InvalidPath(format!("cannot decode with g = {g}, L = {blocks}")));
    }
    let count = u32::try_from(blocks).ok().and_then(|l| g.checked_pow(l));
    if count.is_some_and(|c| index >= c) {
        return Err(Error::InvalidPath(format!(
            "index {index} is outside [0, {g}^{blocks})"
        )));
    }
    let mut digits = vec![0; blocks];
    let mut rest = index;
    for d in digits.iter_mut().rev() {
        *d = rest % g;
        rest /= g;
    }
    Ok(PathCode { digits })
}

/// All `g^L` paths in index order.
pub fn all_paths(g: usize, blocks: usize) -> Result<Vec<PathCode>> {
    let count = u32::try_from(blocks)
        .ok()
        .and_then(|l| g.checked_pow(l))
        .ok_or_else(|| Error::InvalidConfig("path count overflows".into()))?;
    (0..count).map(|i| path_decode(i, g, blocks)).collect()
}

/// A network that can be run: the full net `W_0` or one sub-net `W_i`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Full,
    Path(PathCode),
}

impl Target {
    /// Stable label used in logs and checkpoint names: `full` or the path index.
    pub fn label(&self, g: usize) -> String {
        match self {
            Target::Full => "full".into(),
            Target::Path(p) => p.index(g).map_or_else(|_| format!("[{}]", p.digit_string()), |i| i.to_string()),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Full => f.write_str("full"),
            Target::Path(p) => write!(f, "path[{}]", p.digit_string()),
        }
    }
}
