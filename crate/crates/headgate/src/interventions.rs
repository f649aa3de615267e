//! Per-head edit parameters and the gated hybrid transformation
//! z' = (1 + g_m * m) ⊙ z + g_a * a, plus gating-mode variants, gate
//! freezing, epsilon-pruning, and map serialization.
//!
//! The transformation is arranged so that closed gates (g_a = g_m = 0) give
//! the identity map with no subtraction anywhere, which is what makes the
//! identity bypass exact in floating point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardconcrete::{self, GateParams};
use crate::numerics::{require_finite, RngStream};

pub const MAP_FORMAT_VERSION: u32 = 1;

/// Where edits hook into the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Per-head attention output, before concatenation and the output
    /// projection. Vector width is d_head.
    AttentionHead,
    /// MLP sublayer output, before the residual add. One edit per layer,
    /// vector width is d_model; the head index is fixed to 0.
    MlpOutput,
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::AttentionHead => write!(f, "attention"),
            Site::MlpOutput => write!(f, "mlp"),
        }
    }
}

/// How gates are attached to an entry's two edit roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// One gate for the additive role, one for the multiplicative role.
    Separate,
    /// A single gate drives both roles (one noise draw, one location).
    Shared,
    /// No gates: both roles always fully on.
    None,
}

impl std::fmt::Display for Gating {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gating::Separate => write!(f, "separate"),
            Gating::Shared => write!(f, "shared"),
            Gating::None => write!(f, "none"),
        }
    }
}

/// Which edit roles are trained and applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Hybrid,
    AdditiveOnly,
    MultiplicativeOnly,
}

impl std::fmt::Display for EditMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EditMode::Hybrid => write!(f, "hybrid"),
            EditMode::AdditiveOnly => write!(f, "additive"),
            EditMode::MultiplicativeOnly => write!(f, "multiplicative"),
        }
    }
}

impl EditMode {
    pub fn uses_additive(self) -> bool {
        !matches!(self, EditMode::MultiplicativeOnly)
    }

    pub fn uses_multiplicative(self) -> bool {
        !matches!(self, EditMode::AdditiveOnly)
    }
}

/// One editable site: a scaling vector, a bias vector, and their gates.
///
/// For shared gating the entry's single gate lives in `gate_a`; `gate_m` is
/// carried but unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEdit {
    pub layer: usize,
    pub head: usize,
    pub m: Vec<f64>,
    pub a: Vec<f64>,
    pub gate_a: GateParams,
    pub gate_m: GateParams,
}

impl HeadEdit {
    /// Zero-initialized edit: the transformation is the identity regardless
    /// of gate values, so training starts from the base model.
    pub fn zeros(layer: usize, head: usize, dim: usize, phi_init: f64, shape: &GateParams) -> Self {
        let gate = GateParams {
            phi: phi_init,
            ..*shape
        };
        HeadEdit {
            layer,
            head,
            m: vec![0.0; dim],
            a: vec![0.0; dim],
            gate_a: gate,
            gate_m: gate,
        }
    }
}

/// Apply the gated hybrid edit to one activation vector.
///
/// z' = (1 + g_m * m) ⊙ z + g_a * a, with the mode forcing the scaling term
/// off under `AdditiveOnly` and the bias term off under `MultiplicativeOnly`.
pub fn apply_edit(
    z: &[f64],
    edit: &HeadEdit,
    g_a: f64,
    g_m: f64,
    mode: EditMode,
) -> Result<Vec<f64>> {
    if z.len() != edit.m.len() || z.len() != edit.a.len() {
        return Err(Error::Dimension(format!(
            "apply_edit: z has {} dims, edit vectors have {}/{}",
            z.len(),
            edit.m.len(),
            edit.a.len()
        )));
    }
    let g_m = if mode.uses_multiplicative() { g_m } else { 0.0 };
    let g_a = if mode.uses_additive() { g_a } else { 0.0 };
    Ok(z.iter()
        .zip(edit.m.iter().zip(edit.a.iter()))
        .map(|(&zi, (&mi, &ai))| (1.0 + g_m * mi) * zi + g_a * ai)
        .collect())
}

/// A set of head edits with shared site/gating/mode configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionMap {
    pub site: Site,
    pub gating: Gating,
    pub mode: EditMode,
    /// Width of the edited vectors: d_head for attention sites, d_model for
    /// MLP sites.
    pub d_head: usize,
    /// Shape constants shared by every gate in the map.
    pub gate_shape: GateParams,
    /// Entries sorted by (layer, head), unique per position.
    pub entries: Vec<HeadEdit>,
}

impl InterventionMap {
    pub fn new(
        site: Site,
        gating: Gating,
        mode: EditMode,
        d_head: usize,
        gate_shape: GateParams,
        mut entries: Vec<HeadEdit>,
    ) -> Result<Self> {
        gate_shape.validate()?;
        entries.sort_by_key(|e| (e.layer, e.head));
        for w in entries.windows(2) {
            if w[0].layer == w[1].layer && w[0].head == w[1].head {
                return Err(Error::Invalid(format!(
                    "duplicate entry for layer {} head {}",
                    w[0].layer, w[0].head
                )));
            }
        }
        for e in &entries {
            if e.m.len() != d_head || e.a.len() != d_head {
                return Err(Error::Dimension(format!(
                    "entry ({}, {}): vector lengths {}/{} != d_head {}",
                    e.layer,
                    e.head,
                    e.m.len(),
                    e.a.len(),
                    d_head
                )));
            }
            if site == Site::MlpOutput && e.head != 0 {
                return Err(Error::Invalid(format!(
                    "mlp-site entry at layer {} must use head 0, got {}",
                    e.layer, e.head
                )));
            }
            require_finite("edit m", &e.m)?;
            require_finite("edit a", &e.a)?;
            e.gate_a.validate()?;
            e.gate_m.validate()?;
        }
        Ok(InterventionMap {
            site,
            gating,
            mode,
            d_head,
            gate_shape,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_index(&self, layer: usize, head: usize) -> Option<usize> {
        self.entries
            .binary_search_by_key(&(layer, head), |e| (e.layer, e.head))
            .ok()
    }

    /// Whether the additive gate location is a trainable parameter.
    pub fn trains_phi_a(&self) -> bool {
        match self.gating {
            Gating::None => false,
            Gating::Shared => true,
            Gating::Separate => self.mode.uses_additive(),
        }
    }

    /// Whether the multiplicative gate location is a trainable parameter.
    pub fn trains_phi_m(&self) -> bool {
        self.gating == Gating::Separate && self.mode.uses_multiplicative()
    }

    /// All gates that exist under the map's gating and mode, for the
    /// expected-L0 penalty.
    pub fn gates(&self) -> Vec<&GateParams> {
        let mut out = Vec::new();
        for e in &self.entries {
            match self.gating {
                Gating::None => {}
                Gating::Shared => out.push(&e.gate_a),
                Gating::Separate => {
                    if self.mode.uses_additive() {
                        out.push(&e.gate_a);
                    }
                    if self.mode.uses_multiplicative() {
                        out.push(&e.gate_m);
                    }
                }
            }
        }
        out
    }

    pub fn l0_penalty(&self) -> f64 {
        hardconcrete::l0_penalty(self.gates())
    }

    /// Trainable parameter count per entry under the map's gating and mode.
    pub fn trainable_per_entry(&self) -> usize {
        let mut n = 0;
        if self.mode.uses_multiplicative() {
            n += self.d_head;
        }
        if self.mode.uses_additive() {
            n += self.d_head;
        }
        if self.trains_phi_a() {
            n += 1;
        }
        if self.trains_phi_m() {
            n += 1;
        }
        n
    }

    pub fn trainable_params(&self) -> usize {
        self.len() * self.trainable_per_entry()
    }

    /// Replace every gate by its deterministic expected value. No entries are
    /// dropped (epsilon = 0); disabled roles freeze to gate 0.
    pub fn freeze(&self) -> FrozenMap {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let (raw_a, raw_m) = match self.gating {
                    Gating::None => (1.0, 1.0),
                    Gating::Shared => {
                        let g = hardconcrete::expected_gate(&e.gate_a);
                        (g, g)
                    }
                    Gating::Separate => (
                        hardconcrete::expected_gate(&e.gate_a),
                        hardconcrete::expected_gate(&e.gate_m),
                    ),
                };
                FrozenEdit {
                    layer: e.layer,
                    head: e.head,
                    g_a: if self.mode.uses_additive() { raw_a } else { 0.0 },
                    g_m: if self.mode.uses_multiplicative() { raw_m } else { 0.0 },
                    a: e.a.clone(),
                    m: e.m.clone(),
                }
            })
            .collect();
        FrozenMap {
            site: self.site,
            d_head: self.d_head,
            epsilon: 0.0,
            entries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, &MapFile::Train(self.clone()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_json(path)? {
            MapFile::Train(map) => {
                // Re-run construction checks on foreign input.
                InterventionMap::new(
                    map.site,
                    map.gating,
                    map.mode,
                    map.d_head,
                    map.gate_shape,
                    map.entries,
                )
            }
            MapFile::Frozen(_) => Err(Error::Parse(
                "expected a trainable map file, found a frozen map".into(),
            )),
        }
    }

    /// Canonical serialization used for content hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&to_document(MapFile::Train(self.clone())))
            .expect("map serialization")
    }
}

/// One draw of gate values for a map entry, with pathwise derivatives
/// d(gate)/d(phi) for the training gradient.
#[derive(Debug, Clone, Copy)]
pub struct GateDraw {
    pub g_a: f64,
    pub g_m: f64,
    pub dga_dphi: f64,
    pub dgm_dphi: f64,
}

/// Sample one gate value per gate for a forward pass.
///
/// Gates are per-head task parameters, so a single draw is shared across all
/// token positions and all examples in the batch. Shared gating draws one
/// noise value per entry and uses it for both roles; ungated maps return
/// constant 1 with zero derivative.
pub fn sample_gates(map: &InterventionMap, rng: &mut RngStream) -> Vec<GateDraw> {
    map.entries
        .iter()
        .map(|e| match map.gating {
            Gating::None => GateDraw {
                g_a: 1.0,
                g_m: 1.0,
                dga_dphi: 0.0,
                dgm_dphi: 0.0,
            },
            Gating::Shared => {
                let u = rng.uniform();
                let (g, dg) =
                    hardconcrete::sample_gate_with_grad(&e.gate_a, u).expect("open-interval noise");
                GateDraw {
                    g_a: g,
                    g_m: g,
                    dga_dphi: dg,
                    dgm_dphi: dg,
                }
            }
            Gating::Separate => {
                let (g_a, dga) = if map.mode.uses_additive() {
                    let u = rng.uniform();
                    hardconcrete::sample_gate_with_grad(&e.gate_a, u).expect("open-interval noise")
                } else {
                    (0.0, 0.0)
                };
                let (g_m, dgm) = if map.mode.uses_multiplicative() {
                    let u = rng.uniform();
                    hardconcrete::sample_gate_with_grad(&e.gate_m, u).expect("open-interval noise")
                } else {
                    (0.0, 0.0)
                };
                GateDraw {
                    g_a,
                    g_m,
                    dga_dphi: dga,
                    dgm_dphi: dgm,
                }
            }
        })
        .collect()
}

/// Deterministic map: every gate replaced by its expected value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEdit {
    pub layer: usize,
    pub head: usize,
    pub g_a: f64,
    pub g_m: f64,
    pub a: Vec<f64>,
    pub m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenMap {
    pub site: Site,
    pub d_head: usize,
    /// Pruning threshold this map was filtered with (0 = unpruned).
    pub epsilon: f64,
    pub entries: Vec<FrozenEdit>,
}

impl FrozenMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Heads whose additive gate survives at threshold eps.
    pub fn open_additive_heads(&self, eps: f64) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .filter(|e| e.g_a >= eps)
            .map(|e| (e.layer, e.head))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, &MapFile::Frozen(self.clone()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_json(path)? {
            MapFile::Frozen(map) => Ok(map),
            MapFile::Train(_) => Err(Error::Parse(
                "expected a frozen map file, found a trainable map".into(),
            )),
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&to_document(MapFile::Frozen(self.clone())))
            .expect("map serialization")
    }
}

/// Drop interventions whose frozen gate falls below epsilon.
///
/// Per entry, the multiplicative part is zeroed when g_m < eps and the
/// additive part when g_a < eps; an entry with both parts gone is removed.
/// Surviving parts are untouched.
pub fn prune(frozen: &FrozenMap, epsilon: f64) -> FrozenMap {
    let entries = frozen
        .entries
        .iter()
        .filter_map(|e| {
            let keep_m = e.g_m >= epsilon;
            let keep_a = e.g_a >= epsilon;
            if !keep_m && !keep_a {
                return None;
            }
            Some(FrozenEdit {
                layer: e.layer,
                head: e.head,
                g_a: if keep_a { e.g_a } else { 0.0 },
                g_m: if keep_m { e.g_m } else { 0.0 },
                a: if keep_a { e.a.clone() } else { vec![0.0; e.a.len()] },
                m: if keep_m { e.m.clone() } else { vec![0.0; e.m.len()] },
            })
        })
        .collect();
    FrozenMap {
        site: frozen.site,
        d_head: frozen.d_head,
        epsilon,
        entries,
    }
}

/// On-disk representation shared by trainable and frozen maps.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MapFile {
    Train(InterventionMap),
    Frozen(FrozenMap),
}

#[derive(Clone, Serialize, Deserialize)]
struct MapDocument {
    format_version: u32,
    #[serde(flatten)]
    payload: MapFile,
}

fn to_document(map: MapFile) -> MapDocument {
    MapDocument {
        format_version: MAP_FORMAT_VERSION,
        payload: map,
    }
}

fn save_json(path: &Path, map: &MapFile) -> Result<()> {
    let text = serde_json::to_string_pretty(&to_document(map.clone())).expect("map serialization");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_json(path: &Path) -> Result<MapFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    // Check the version before attempting a full parse so version mismatches
    // are reported as such rather than as shape errors.
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse(format!("{}: missing format_version", path.display())))?
        as u32;
    if found != MAP_FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: MAP_FORMAT_VERSION,
        });
    }
    let doc: MapDocument = serde_json::from_value(value)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(doc.payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardconcrete::prob_open;

    fn edit(layer: usize, head: usize, m: Vec<f64>, a: Vec<f64>) -> HeadEdit {
        HeadEdit {
            layer,
            head,
            m,
            a,
            gate_a: GateParams::default(),
            gate_m: GateParams::default(),
        }
    }

    fn small_map(gating: Gating, mode: EditMode, entries: Vec<HeadEdit>) -> InterventionMap {
        InterventionMap::new(
            Site::AttentionHead,
            gating,
            mode,
            entries.first().map(|e| e.m.len()).unwrap_or(2),
            GateParams::default(),
            entries,
        )
        .unwrap()
    }

    #[test]
    fn apply_edit_identity_when_closed() {
        let e = edit(0, 0, vec![0.7, -0.3], vec![5.0, -2.0]);
        let z = vec![1.25, -0.5];
        let out = apply_edit(&z, &e, 0.0, 0.0, EditMode::Hybrid).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn apply_edit_pure_additive() {
        let e = edit(0, 0, vec![0.7, -0.3], vec![0.1, 0.2]);
        let out = apply_edit(&[1.0, 2.0], &e, 1.0, 0.0, EditMode::Hybrid).unwrap();
        assert_eq!(out, vec![1.1, 2.2]);
    }

    #[test]
    fn apply_edit_hand_computed() {
        // z = [1, 2], m = [0.5, -1], a = [0.1, 0.2], both gates 1:
        // (1 + 0.5) * 1 + 0.1 = 1.6, (1 - 1) * 2 + 0.2 = 0.2.
        let e = edit(0, 0, vec![0.5, -1.0], vec![0.1, 0.2]);
        let out = apply_edit(&[1.0, 2.0], &e, 1.0, 1.0, EditMode::Hybrid).unwrap();
        assert!((out[0] - 1.6).abs() < 1e-15 && (out[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn apply_edit_mode_masks_roles() {
        let e = edit(0, 0, vec![0.5, -1.0], vec![0.1, 0.2]);
        let add = apply_edit(&[1.0, 2.0], &e, 1.0, 1.0, EditMode::AdditiveOnly).unwrap();
        assert_eq!(add, vec![1.1, 2.2]);
        let mult = apply_edit(&[1.0, 2.0], &e, 1.0, 1.0, EditMode::MultiplicativeOnly).unwrap();
        assert!((mult[0] - 1.5).abs() < 1e-15 && (mult[1] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn apply_edit_length_mismatch() {
        let e = edit(0, 0, vec![0.5], vec![0.1]);
        assert!(apply_edit(&[1.0, 2.0], &e, 1.0, 1.0, EditMode::Hybrid).is_err());
    }

    #[test]
    fn sample_gates_ungated_is_all_ones() {
        let map = small_map(
            Gating::None,
            EditMode::Hybrid,
            vec![edit(0, 0, vec![0.0; 2], vec![0.0; 2])],
        );
        let mut rng = RngStream::new(5);
        let draws = sample_gates(&map, &mut rng);
        assert_eq!((draws[0].g_a, draws[0].g_m), (1.0, 1.0));
    }

    #[test]
    fn shared_gate_matches_separate_with_equal_phi_and_noise() {
        // With phi_a = phi_m and the same noise draw, a shared gate is
        // definitionally the same as separate gates.
        let g = GateParams::with_phi(0.4);
        let mut rng = RngStream::new(11);
        let u = rng.uniform();
        let shared = hardconcrete::sample_gate(&g, u).unwrap();
        let sep_a = hardconcrete::sample_gate(&g, u).unwrap();
        let sep_m = hardconcrete::sample_gate(&g, u).unwrap();
        assert_eq!(shared, sep_a);
        assert_eq!(shared, sep_m);
    }

    #[test]
    fn sampled_open_fraction_matches_prob_open() {
        let map = small_map(
            Gating::Separate,
            EditMode::Hybrid,
            vec![edit(0, 0, vec![0.0; 2], vec![0.0; 2])],
        );
        let mut map = map;
        map.entries[0].gate_a.phi = 0.0;
        map.entries[0].gate_m.phi = 0.0;
        let mut rng = RngStream::new(21);
        let n = 100_000;
        let mut open = 0usize;
        for _ in 0..n {
            let d = sample_gates(&map, &mut rng)[0];
            if d.g_a > 0.0 {
                open += 1;
            }
        }
        let q = prob_open(&map.entries[0].gate_a);
        let sd = (q * (1.0 - q) / n as f64).sqrt();
        assert!(((open as f64 / n as f64) - q).abs() <= 3.0 * sd);
    }

    #[test]
    fn freeze_saturated_maps() {
        let mut lo = small_map(
            Gating::Separate,
            EditMode::Hybrid,
            vec![edit(0, 0, vec![0.0; 2], vec![0.0; 2])],
        );
        lo.entries[0].gate_a.phi = -20.0;
        lo.entries[0].gate_m.phi = -20.0;
        let f = lo.freeze();
        assert_eq!((f.entries[0].g_a, f.entries[0].g_m), (0.0, 0.0));
        assert_eq!(f.len(), 1);

        let mut hi = lo.clone();
        hi.entries[0].gate_a.phi = 20.0;
        hi.entries[0].gate_m.phi = 20.0;
        let f = hi.freeze();
        assert_eq!((f.entries[0].g_a, f.entries[0].g_m), (1.0, 1.0));

        let mut mid = lo.clone();
        mid.entries[0].gate_a.phi = 0.0;
        mid.entries[0].gate_m.phi = 0.0;
        let f = mid.freeze();
        assert!((f.entries[0].g_a - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prune_zero_epsilon_is_identity() {
        let map = small_map(
            Gating::Separate,
            EditMode::Hybrid,
            vec![
                edit(0, 0, vec![0.1, 0.2], vec![0.3, 0.4]),
                edit(1, 3, vec![-0.1, 0.0], vec![0.0, 0.9]),
            ],
        );
        let frozen = map.freeze();
        assert_eq!(prune(&frozen, 0.0), frozen);
    }

    #[test]
    fn prune_drops_only_dead_parts() {
        let frozen = FrozenMap {
            site: Site::AttentionHead,
            d_head: 2,
            epsilon: 0.0,
            entries: vec![
                FrozenEdit {
                    layer: 0,
                    head: 0,
                    g_a: 0.8,
                    g_m: 1e-5,
                    a: vec![0.3, 0.4],
                    m: vec![0.1, 0.2],
                },
                FrozenEdit {
                    layer: 0,
                    head: 1,
                    g_a: 1e-7,
                    g_m: 0.0,
                    a: vec![0.5, 0.6],
                    m: vec![0.7, 0.8],
                },
            ],
        };
        let pruned = prune(&frozen, 1e-3);
        assert_eq!(pruned.len(), 1);
        let e = &pruned.entries[0];
        assert_eq!((e.layer, e.head), (0, 0));
        assert_eq!(e.g_a, 0.8);
        assert_eq!(e.g_m, 0.0);
        assert_eq!(e.m, vec![0.0, 0.0]);
        assert_eq!(e.a, vec![0.3, 0.4]);
    }

    #[test]
    fn prune_above_one_drops_everything() {
        let map = small_map(
            Gating::Separate,
            EditMode::Hybrid,
            vec![edit(0, 0, vec![0.1, 0.2], vec![0.3, 0.4])],
        );
        assert_eq!(prune(&map.freeze(), 1.1).len(), 0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let mut map = small_map(
            Gating::Separate,
            EditMode::Hybrid,
            vec![edit(1, 2, vec![0.1, -0.25], vec![1e-17, 3.7])],
        );
        map.entries[0].gate_a.phi = 0.123456789012345678;
        map.save(&path).unwrap();
        let loaded = InterventionMap::load(&path).unwrap();
        assert_eq!(loaded, map);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let map = small_map(
            Gating::Separate,
            EditMode::Hybrid,
            vec![edit(0, 0, vec![0.1, 0.2], vec![0.3, 0.4])],
        );
        map.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        match InterventionMap::load(&path) {
            Err(Error::Parse(_)) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let map = small_map(
            Gating::Separate,
            EditMode::Hybrid,
            vec![edit(0, 0, vec![0.1, 0.2], vec![0.3, 0.4])],
        );
        map.save(&path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        match InterventionMap::load(&path) {
            Err(Error::Version { found: 99, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_entries_rejected() {
        let r = InterventionMap::new(
            Site::AttentionHead,
            Gating::Separate,
            EditMode::Hybrid,
            2,
            GateParams::default(),
            vec![
                edit(0, 0, vec![0.0; 2], vec![0.0; 2]),
                edit(0, 0, vec![0.0; 2], vec![0.0; 2]),
            ],
        );
        assert!(r.is_err());
    }

    #[test]
    fn penalty_respects_gating_and_mode() {
        let e = || edit(0, 0, vec![0.0; 2], vec![0.0; 2]);
        let sep = small_map(Gating::Separate, EditMode::Hybrid, vec![e()]);
        let shared = small_map(Gating::Shared, EditMode::Hybrid, vec![e()]);
        let none = small_map(Gating::None, EditMode::Hybrid, vec![e()]);
        let add = small_map(Gating::Separate, EditMode::AdditiveOnly, vec![e()]);
        assert_eq!(sep.gates().len(), 2);
        assert_eq!(shared.gates().len(), 1);
        assert_eq!(none.gates().len(), 0);
        assert_eq!(add.gates().len(), 1);
        assert_eq!(none.l0_penalty(), 0.0);
    }
}
