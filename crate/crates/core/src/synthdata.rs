//! Procedural multi-image-per-identity corpus.
//!
//! An identity is a small set of coloured Gaussian blobs; its images differ by
//! a translation, a rotation and a brightness gain. The manifest (specs plus
//! variations) is the canonical storage: pixels are always re-rendered.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Image;
use crate::rng::{substream, Stream};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_RESOLUTION: usize = 32;

pub const MU_RANGE: (f64, f64) = (-0.6, 0.6);
pub const SIGMA_RANGE_IND: (f64, f64) = (0.08, 0.2);
pub const SIGMA_RANGE_OOD: (f64, f64) = (0.05, 0.09);
pub const BLOBS_IND: usize = 3;
pub const BLOBS_OOD: usize = 4;
pub const SHIFT_RANGE: (f64, f64) = (-0.1, 0.1);
pub const ROTATION_RANGE_DEG: (f64, f64) = (-15.0, 15.0);
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub mu: [f64; 2],
    pub sigma: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: String,
    pub blobs: Vec<Blob>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationParams {
    pub t: [f64; 2],
    /// Degrees.
    pub theta: f64,
    pub b: f64,
}

impl VariationParams {
    pub const ZERO: VariationParams = VariationParams {
        t: [0.0, 0.0],
        theta: 0.0,
        b: 1.0,
    };

    pub fn sample(rng: &mut Stream) -> Self {
        VariationParams {
            t: [
                rng.random_range(SHIFT_RANGE.0..=SHIFT_RANGE.1),
                rng.random_range(SHIFT_RANGE.0..=SHIFT_RANGE.1),
            ],
            theta: rng.random_range(ROTATION_RANGE_DEG.0..=ROTATION_RANGE_DEG.1),
            b: rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1),
        }
    }

    pub fn in_range(&self) -> bool {
        let within = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
        self.t.iter().all(|&v| within(v, SHIFT_RANGE))
            && within(self.theta, ROTATION_RANGE_DEG)
            && within(self.b, BRIGHTNESS_RANGE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    InDomain,
    OutOfDomain,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(Regime::InDomain),
            "out_of_domain" => Ok(Regime::OutOfDomain),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

impl Regime {
    pub fn blob_count(self) -> usize {
        match self {
            Regime::InDomain => BLOBS_IND,
            Regime::OutOfDomain => BLOBS_OOD,
        }
    }

    pub fn sigma_range(self) -> (f64, f64) {
        match self {
            Regime::InDomain => SIGMA_RANGE_IND,
            Regime::OutOfDomain => SIGMA_RANGE_OOD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldoutInd,
    HeldoutOod,
}

impl Split {
    pub fn regime(self) -> Regime {
        match self {
            Split::Train | Split::HeldoutInd => Regime::InDomain,
            Split::HeldoutOod => Regime::OutOfDomain,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldoutInd => "ind",
            Split::HeldoutOod => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::HeldoutInd => "heldout_ind",
            Split::HeldoutOod => "heldout_ood",
        })
    }
}

pub fn sample_identity(rng: &mut Stream, regime: Regime, identity_id: &str) -> IdentitySpec {
    let (s_lo, s_hi) = regime.sigma_range();
    let blobs = (0..regime.blob_count())
        .map(|_| Blob {
            mu: [
                rng.random_range(MU_RANGE.0..=MU_RANGE.1),
                rng.random_range(MU_RANGE.0..=MU_RANGE.1),
            ],
            sigma: rng.random_range(s_lo..=s_hi),
            color: [
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
            ],
        })
        .collect();
    IdentitySpec {
        identity_id: identity_id.to_string(),
        blobs,
    }
}

impl IdentitySpec {
    /// Checks every parameter against the ranges of `regime`.
    pub fn validate(&self, regime: Regime) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Config(format!(
                "identity {}: {what} out of range for {regime:?}",
                self.identity_id
            )))
        };
        if self.blobs.len() != regime.blob_count() {
            return bad("blob count");
        }
        let (s_lo, s_hi) = regime.sigma_range();
        for b in &self.blobs {
            if b.mu.iter().any(|&m| !(MU_RANGE.0..=MU_RANGE.1).contains(&m)) {
                return bad("mu");
            }
            if !(s_lo..=s_hi).contains(&b.sigma) {
                return bad("sigma");
            }
            if b.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return bad("color");
            }
        }
        Ok(())
    }
}

/// Pre-clamp intensity of every channel at grid point `(px, py)`.
pub fn raw_intensity(spec: &IdentitySpec, var: &VariationParams, px: f64, py: f64) -> [f64; 3] {
    let (s, c) = var.theta.to_radians().sin_cos();
    let dx = px - var.t[0];
    let dy = py - var.t[1];
    let qx = c * dx - s * dy;
    let qy = s * dx + c * dy;
    let mut out = [0.0; 3];
    for blob in &spec.blobs {
        let d2 = (qx - blob.mu[0]).powi(2) + (qy - blob.mu[1]).powi(2);
        let g = (-d2 / (2.0 * blob.sigma * blob.sigma)).exp();
        for (o, col) in out.iter_mut().zip(blob.color) {
            *o += col * g;
        }
    }
    out.map(|v| v * var.b)
}

/// Grid coordinate of pixel index `i` along an axis of `resolution` pixels.
pub fn grid_coord(i: usize, resolution: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (resolution - 1) as f64
}

pub fn render_identity(spec: &IdentitySpec, var: &VariationParams, resolution: usize) -> Image {
    assert!(resolution >= 8, "resolution must be at least 8");
    let plane = resolution * resolution;
    let mut data = vec![0.0f32; 3 * plane];
    for row in 0..resolution {
        let py = grid_coord(row, resolution);
        for col in 0..resolution {
            let px = grid_coord(col, resolution);
            let v = raw_intensity(spec, var, px, py);
            for ch in 0..3 {
                data[ch * plane + row * resolution + col] = (2.0 * v[ch].clamp(0.0, 1.0) - 1.0) as f32;
            }
        }
    }
    Image::from_chw(resolution, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub spec: IdentitySpec,
    pub split: Split,
    pub variations: Vec<VariationParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub generation_seed: u64,
    pub images_per_identity: usize,
    pub identities: Vec<IdentityRecord>,
}

/// Counts for [`build_corpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSize {
    pub n_train: usize,
    pub n_heldout_ind: usize,
    pub n_heldout_ood: usize,
    pub images_per_identity: usize,
}

impl Default for CorpusSize {
    fn default() -> Self {
        CorpusSize {
            n_train: 200,
            n_heldout_ind: 20,
            n_heldout_ood: 20,
            images_per_identity: 10,
        }
    }
}

pub fn build_corpus(size: CorpusSize, seed: u64) -> Result<Corpus> {
    let CorpusSize {
        n_train,
        n_heldout_ind,
        n_heldout_ood,
        images_per_identity,
    } = size;
    if n_train == 0 || n_heldout_ind == 0 || n_heldout_ood == 0 || images_per_identity == 0 {
        return Err(Error::Config("corpus counts must all be at least 1".into()));
    }
    let splits = std::iter::repeat_n(Split::Train, n_train)
        .chain(std::iter::repeat_n(Split::HeldoutInd, n_heldout_ind))
        .chain(std::iter::repeat_n(Split::HeldoutOod, n_heldout_ood));
    let mut per_split = [0usize; 3];
    let identities = splits
        .enumerate()
        .map(|(g, split)| {
            let k = &mut per_split[split as usize];
            let id = format!("{}-{:03}", split.tag(), *k);
            *k += 1;
            let spec = sample_identity(&mut substream(seed, "identity", g as u64), split.regime(), &id);
            let mut vr = substream(seed, "variation", g as u64);
            let variations = (0..images_per_identity)
                .map(|_| VariationParams::sample(&mut vr))
                .collect();
            IdentityRecord {
                spec,
                split,
                variations,
            }
        })
        .collect();
    Ok(Corpus {
        generation_seed: seed,
        images_per_identity,
        identities,
    })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.identities
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn render(&self, identity: usize, variation: usize, resolution: usize) -> Image {
        let rec = &self.identities[identity];
        render_identity(&rec.spec, &rec.variations[variation], resolution)
    }

    /// All stored images of one identity, in variation order.
    pub fn render_all(&self, identity: usize, resolution: usize) -> Vec<Image> {
        (0..self.identities[identity].variations.len())
            .map(|v| self.render(identity, v, resolution))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for rec in &self.identities {
            rec.spec.validate(rec.split.regime())?;
            if rec.variations.len() != self.images_per_identity {
                return Err(Error::Config(format!(
                    "identity {} has {} variations, expected {}",
                    rec.spec.identity_id,
                    rec.variations.len(),
                    self.images_per_identity
                )));
            }
            if let Some(v) = rec.variations.iter().find(|v| !v.in_range()) {
                return Err(Error::Config(format!(
                    "identity {}: variation {v:?} out of range",
                    rec.spec.identity_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestIdentity {
    identity_id: String,
    split: Split,
    blobs: Vec<Blob>,
    variations: Vec<VariationParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    generation_seed: u64,
    identities: Vec<ManifestIdentity>,
}

pub fn corpus_to_json(corpus: &Corpus) -> String {
    let m = Manifest {
        version: MANIFEST_VERSION,
        generation_seed: corpus.generation_seed,
        identities: corpus
            .identities
            .iter()
            .map(|r| ManifestIdentity {
                identity_id: r.spec.identity_id.clone(),
                split: r.split,
                blobs: r.spec.blobs.clone(),
                variations: r.variations.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&m).expect("manifest serializes")
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, corpus_to_json(corpus)).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let fail = |reason: String| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(fail(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    let images_per_identity = m.identities.first().map_or(0, |i| i.variations.len());
    let corpus = Corpus {
        generation_seed: m.generation_seed,
        images_per_identity,
        identities: m
            .identities
            .into_iter()
            .map(|i| IdentityRecord {
                spec: IdentitySpec {
                    identity_id: i.identity_id,
                    blobs: i.blobs,
                },
                split: i.split,
                variations: i.variations,
            })
            .collect(),
    };
    corpus.validate().map_err(|e| fail(e.to_string()))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_blob() -> IdentitySpec {
        IdentitySpec {
            identity_id: "solo".into(),
            blobs: vec![Blob {
                mu: [0.0, 0.0],
                sigma: 0.15,
                color: [1.0, 1.0, 1.0],
            }],
        }
    }

    #[test]
    fn sampling_is_deterministic_and_respects_regime() {
        let a = sample_identity(&mut substream(7, "s", 0), Regime::InDomain, "a");
        let b = sample_identity(&mut substream(7, "s", 0), Regime::InDomain, "a");
        assert_eq!(a, b);
        assert_eq!(a.blobs.len(), 3);
        let o = sample_identity(&mut substream(7, "s", 1), Regime::OutOfDomain, "o");
        assert_eq!(o.blobs.len(), 4);
        o.validate(Regime::OutOfDomain).unwrap();
    }

    #[test]
    fn unknown_regime_is_a_config_error() {
        assert!(matches!("sideways".parse::<Regime>(), Err(Error::Config(_))));
        assert_eq!("out_of_domain".parse::<Regime>().unwrap(), Regime::OutOfDomain);
    }

    #[test]
    fn thousand_in_domain_samples_stay_in_range() {
        let mut rng = substream(11, "range", 0);
        for i in 0..1000 {
            let s = sample_identity(&mut rng, Regime::InDomain, &i.to_string());
            for b in &s.blobs {
                assert!(b.mu.iter().all(|m| (-0.6..=0.6).contains(m)));
            }
            s.validate(Regime::InDomain).unwrap();
        }
    }

    #[test]
    fn centered_blob_peaks_at_center() {
        let img = render_identity(&one_blob(), &VariationParams::ZERO, 33);
        let max = img.data().iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(img.get(0, 16, 16), max);
        assert!(img.data().iter().filter(|&&v| v == max).count() <= 3);
    }

    #[test]
    fn render_is_bitwise_deterministic_and_bounded() {
        let spec = sample_identity(&mut substream(3, "s", 0), Regime::InDomain, "x");
        let var = VariationParams::sample(&mut substream(3, "v", 0));
        let a = render_identity(&spec, &var, 32);
        let b = render_identity(&spec, &var, 32);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn brightness_scales_unclamped_intensity() {
        let mut spec = one_blob();
        spec.blobs[0].color = [0.4, 0.2, 0.3];
        let lo = VariationParams { b: 0.9, ..VariationParams::ZERO };
        let hi = VariationParams { b: 1.1, ..VariationParams::ZERO };
        let res = 16;
        let a = render_identity(&spec, &lo, res);
        let b = render_identity(&spec, &hi, res);
        for (x, y) in a.data().iter().zip(b.data()) {
            // recover pre-clamp intensities; peak 0.44 never clamps
            let ia = (f64::from(*x) + 1.0) / 2.0;
            let ib = (f64::from(*y) + 1.0) / 2.0;
            if ib > 1e-2 {
                assert!((ia / ib - 0.9 / 1.1).abs() < 1e-4, "{ia} {ib}");
            }
        }
        // exact form on the analytic intensities
        for i in 0..res {
            let p = grid_coord(i, res);
            let ra = raw_intensity(&spec, &lo, p, -p);
            let rb = raw_intensity(&spec, &hi, p, -p);
            for c in 0..3 {
                assert!((ra[c] * 1.1 - rb[c] * 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corpus_counts_and_regimes() {
        let c = build_corpus(CorpusSize::default(), 0).unwrap();
        assert_eq!(c.len(), 240);
        let images: usize = c.identities.iter().map(|r| r.variations.len()).sum();
        assert_eq!(images, 2400);
        assert_eq!(c.indices(Split::Train).len(), 200);
        assert_eq!(c.indices(Split::HeldoutInd).len(), 20);
        for i in c.indices(Split::HeldoutOod) {
            assert_eq!(c.identities[i].spec.blobs.len(), 4);
        }
        assert_eq!(c, build_corpus(CorpusSize::default(), 0).unwrap());
        c.validate().unwrap();
    }

    #[test]
    fn zero_counts_rejected() {
        let size = CorpusSize {
            n_heldout_ood: 0,
            ..CorpusSize::default()
        };
        assert!(build_corpus(size, 1).is_err());
    }
}
