use serde::{Deserialize, Serialize};

use crate::graphio::{build_adj, split_random, Dataset, Graph, Normalization, OodGroup};
use crate::metrics::MetricKind;
use crate::numcore::{spmm, DenseMatrix, Rng, Stream};

use super::probe::LinearProbe;
use super::{ShiftError, STANDARD_SPLIT};

/// Domain-specific spurious features from a frozen random graph
/// convolution over `[onehot(y) ∥ onehot(domain)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpuriousGenConfig {
    /// Width of the generated block; `None` uses the base feature width.
    pub spurious_dim: Option<usize>,
    pub num_domains: usize,
    /// 1-based domain ids trained on.
    pub id_domains: Vec<usize>,
    /// 1-based domain ids held out.
    pub ood_domains: Vec<usize>,
    /// Propagation layers of the generator, ReLU in between.
    pub layers: usize,
    pub seed: u64,
}

impl Default for SpuriousGenConfig {
    fn default() -> Self {
        Self {
            spurious_dim: None,
            num_domains: 6,
            id_domains: vec![1, 2, 3],
            ood_domains: vec![4, 5, 6],
            layers: 1,
            seed: 0,
        }
    }
}

impl SpuriousGenConfig {
    fn validate(&self) -> Result<(), ShiftError> {
        let bad = |m: String| Err(ShiftError::Config(m));
        if self.spurious_dim == Some(0) {
            return bad("spurious_dim must be at least 1".into());
        }
        if self.layers == 0 {
            return bad("generator needs at least one layer".into());
        }
        if self.id_domains.is_empty() {
            return bad("at least one ID domain is required".into());
        }
        for &d in self.id_domains.iter().chain(&self.ood_domains) {
            if d == 0 || d > self.num_domains {
                return bad(format!("domain {d} outside 1..={}", self.num_domains));
            }
        }
        if self.id_domains.iter().any(|d| self.ood_domains.contains(d)) {
            return bad("ID and OOD domain sets overlap".into());
        }
        Ok(())
    }
}

/// Frozen generator weights, shared by every domain.
struct Generator {
    weights: Vec<DenseMatrix>,
}

impl Generator {
    fn new(input: usize, out: usize, layers: usize, rng: &mut Rng) -> Self {
        let mut fan_in = input;
        let weights = (0..layers)
            .map(|_| {
                let w = rng.gaussian_matrix(fan_in, out, (2.0 / fan_in as f64).sqrt());
                fan_in = out;
                w
            })
            .collect();
        Self { weights }
    }

    fn apply(&self, adj: &crate::numcore::SparseAdj, input: &DenseMatrix) -> Result<DenseMatrix, ShiftError> {
        let mut h = input.clone();
        for (l, w) in self.weights.iter().enumerate() {
            if l > 0 {
                h = h.map(|v| v.max(0.0));
            }
            h = spmm(adj, &h.matmul(w)?)?;
        }
        Ok(h)
    }
}

/// Builds one graph per domain from `base`, each with features
/// `[X ∥ X̃⁽ⁱ⁾]`. The generator uses a row-normalized adjacency with
/// self-loops, so a node's spurious features depend only on its label,
/// the label multiset of its neighbors and the domain.
pub fn gen_spurious_dataset(base: &Graph, cfg: &SpuriousGenConfig) -> Result<Dataset, ShiftError> {
    cfg.validate()?;
    let (n, c) = (base.n(), base.num_classes());
    let out = cfg.spurious_dim.unwrap_or(base.feature_dim());
    let input = c + cfg.num_domains;
    let root = Rng::new(cfg.seed);
    let generator = Generator::new(input, out, cfg.layers, &mut root.fork(Stream::Data));
    let adj = build_adj(base, true, Normalization::Row);

    let domain_graph = |domain: usize| -> Result<(Graph, DenseMatrix), ShiftError> {
        let onehot = DenseMatrix::from_fn(n, input, |v, j| {
            let hot = if j < c { base.labels()[v] == j } else { j - c == domain - 1 };
            if hot { 1.0 } else { 0.0 }
        });
        let spurious = generator.apply(&adj, &onehot)?;
        let features = base.features().hstack(&spurious)?;
        Ok((base.with_features(features)?, spurious))
    };

    let mut id_graphs = Vec::new();
    let mut ood_graphs = Vec::new();
    let mut spurious_blocks = Vec::new();
    for (domains, target) in [(&cfg.id_domains, &mut id_graphs), (&cfg.ood_domains, &mut ood_graphs)] {
        for &d in domains.iter() {
            let (g, s) = domain_graph(d)?;
            target.push((format!("domain_{d}"), g));
            spurious_blocks.push(s);
        }
    }

    // Probe on the spurious block: fit on the first ID domain, score on the
    // first OOD domain.
    let probe_rng = root.fork(Stream::Probe);
    let probe = LinearProbe::fit(&spurious_blocks[0], base.labels(), c, 200, &probe_rng)?;
    let probe_id = probe.accuracy(&spurious_blocks[0], base.labels())?;
    let probe_ood = match spurious_blocks.get(cfg.id_domains.len()) {
        Some(block) => Some(probe.accuracy(block, base.labels())?),
        None => None,
    };

    let universe: Vec<usize> = (0..n * cfg.id_domains.len()).collect();
    let mut split = split_random(&universe, STANDARD_SPLIT, cfg.seed)?;
    split.ood_groups = ood_graphs.iter().map(|(name, _)| OodGroup::Graph(name.clone())).collect();
    let generator_meta = serde_json::json!({
        "kind": "citation_spurious",
        "config": cfg,
        "spurious_dim": out,
        "normalization": "row_with_self_loops",
        "weight_std": "sqrt(2/fan_in)",
        "probe": {
            "fit_domain": cfg.id_domains[0],
            "eval_domain": cfg.ood_domains.first(),
            "id_accuracy": probe_id,
            "ood_accuracy": probe_ood,
        },
    });
    Ok(Dataset::new(
        "citation_spurious",
        MetricKind::Accuracy,
        id_graphs,
        ood_graphs,
        split,
        generator_meta,
    )?)
}
