//! Synthetic identity dataset and identity-balanced batch sampling.
//!
//! Every identity is a layered color-block figure derived from
//! `(seed, identity)`. Individual samples add brightness jitter, a horizontal
//! shift, pixel noise and a camera-dependent tint.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 7] = b"HBFPDS1";
pub const NUM_CAMERAS: u32 = 4;
pub const CHANNELS: usize = 3;

const CAMERA_TINT: [[f64; 3]; NUM_CAMERAS as usize] = [
    [0.08, 0.0, -0.06],
    [-0.06, 0.07, 0.0],
    [0.0, -0.06, 0.08],
    [0.06, 0.05, -0.05],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train = 0,
    Query = 1,
    Gallery = 2,
}

impl Split {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Query),
            2 => Ok(Split::Gallery),
            _ => Err(Error::Format(format!("unknown split tag {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`.
    pub image: Tensor,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

/// Shape of a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub train_ids: usize,
    pub test_ids: usize,
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    /// Leading samples of each test identity that become queries.
    pub queries_per_id: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_ids: 16,
            test_ids: 8,
            per_id: 8,
            height: 48,
            width: 16,
            queries_per_id: 2,
        }
    }
}

/// Rng keyed by `(seed, purpose, key)`.
fn keyed_rng(seed: u64, purpose: u64, key: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&purpose.to_le_bytes());
    bytes[16..24].copy_from_slice(&key.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// The noise-free figure of one identity, `[3, height, width]`.
pub fn identity_pattern(seed: u64, identity: u32, height: usize, width: usize) -> Tensor {
    let mut rng = keyed_rng(seed, 0, identity as u64);
    // Head, torso, legs, feet, with jittered boundaries.
    let fractions = [0.0, 0.18, 0.5, 0.88, 1.0];
    let mut bounds: Vec<usize> = fractions
        .iter()
        .map(|f| (f * height as f64).round() as usize)
        .collect();
    for b in &mut bounds[1..4] {
        let jitter = rng.gen_range(-2i64..=2);
        *b = (*b as i64 + jitter).clamp(1, height as i64 - 1) as usize;
    }
    let colors: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
        .collect();
    let stripe: Option<([f64; 3], usize)> = rng
        .gen_bool(0.5)
        .then(|| ([rng.gen(), rng.gen(), rng.gen()], rng.gen_range(2..=4)));

    let mut img = Tensor::zeros(&[CHANNELS, height, width]);
    let data = img.data_mut();
    for y in 0..height {
        let band = (0..4).rev().find(|&b| y >= bounds[b]).unwrap_or(0);
        for x in 0..width {
            let mut c = colors[band];
            if let (1, Some((alt, period))) = (band, stripe) {
                if (x / period) % 2 == 1 {
                    c = alt;
                }
            }
            for ch in 0..CHANNELS {
                data[(ch * height + y) * width + x] = c[ch];
            }
        }
    }
    img
}

/// Renders sample `index` of `identity`, seen by camera `index % 4`.
fn render_sample(base: &Tensor, seed: u64, identity: u32, index: usize) -> (Tensor, u32) {
    let (h, w) = (base.dims()[1], base.dims()[2]);
    let camera = (index as u32) % NUM_CAMERAS;
    let mut rng = keyed_rng(seed, 1, ((identity as u64) << 32) | index as u64);
    let brightness = 1.0 + rng.gen_range(-0.15..0.15);
    let shift = rng.gen_range(-2i64..=2);
    let tint = CAMERA_TINT[camera as usize];
    let mut img = Tensor::zeros(base.dims());
    let src = base.data();
    for ch in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let sx = (x as i64 - shift).clamp(0, w as i64 - 1) as usize;
                let noise: f64 = 0.05 * rng.sample::<f64, _>(StandardNormal);
                img.data_mut()[(ch * h + y) * w + x] =
                    brightness * src[(ch * h + y) * w + sx] + tint[ch] + noise;
            }
        }
    }
    (img, camera)
}

/// `per_id` samples of each identity in `ids`, all tagged as training data.
pub fn generate_synthetic(
    ids: std::ops::Range<u32>,
    per_id: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if per_id < 2 {
        return Err(contract_err!("need at least 2 samples per identity, got {per_id}"));
    }
    if height < 4 || width < 4 {
        return Err(contract_err!("image {height}x{width} too small"));
    }
    let mut out = Vec::with_capacity(ids.len() * per_id);
    for id in ids {
        let base = identity_pattern(seed, id, height, width);
        for i in 0..per_id {
            let (image, camera) = render_sample(&base, seed, id, i);
            out.push(Sample {
                image,
                identity: id,
                camera,
                split: Split::Train,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Disjoint train and test identities; the first `queries_per_id` samples of
    /// each test identity are queries and the rest form the gallery.
    pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        if spec.train_ids < 2 || spec.test_ids < 1 {
            return Err(contract_err!(
                "need >= 2 train and >= 1 test identities, got {} and {}",
                spec.train_ids,
                spec.test_ids
            ));
        }
        if spec.queries_per_id == 0 || spec.queries_per_id >= spec.per_id {
            return Err(contract_err!(
                "queries per identity must be in 1..{}, got {}",
                spec.per_id,
                spec.queries_per_id
            ));
        }
        let train_end = spec.train_ids as u32;
        let test_end = train_end + spec.test_ids as u32;
        let mut samples = generate_synthetic(0..train_end, spec.per_id, spec.height, spec.width, seed)?;
        let mut test = generate_synthetic(train_end..test_end, spec.per_id, spec.height, spec.width, seed)?;
        for (i, s) in test.iter_mut().enumerate() {
            s.split = if i % spec.per_id < spec.queries_per_id {
                Split::Query
            } else {
                Split::Gallery
            };
        }
        samples.extend(test);
        Ok(Self { samples })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn image_dims(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.dims())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&s.identity.to_le_bytes())?;
            w.write_all(&s.camera.to_le_bytes())?;
            w.write_all(&[s.split as u8])?;
            write_tensor(&mut w, &s.image)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not an HBFPDS1 dataset file".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let identity = read_u32(&mut r)?;
            let camera = read_u32(&mut r)?;
            let mut split = [0u8];
            r.read_exact(&mut split)?;
            let split = Split::from_u8(split[0])?;
            let image = read_tensor(&mut r)?;
            samples.push(Sample {
                image,
                identity,
                camera,
                split,
            });
        }
        Ok(Self { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Rank (u32), dims (u32 each), then little-endian f64 values.
pub(crate) fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

/// A batch of `P` identities with `K` samples each, identity-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    /// Indices into the sampled pool.
    pub indices: Vec<usize>,
    pub identities: Vec<u32>,
}

/// Identity-balanced sampler. Identities are drawn uniformly without
/// replacement within a batch; each identity's samples are dealt without
/// replacement until exhausted, then reshuffled.
pub struct PkSampler {
    groups: Vec<(u32, Vec<usize>)>,
    pools: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `identities[i]` is the identity of pool item `i`.
    pub fn new(identities: &[u32], p: usize, k: usize) -> Result<Self> {
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in identities.iter().enumerate() {
            by_id.entry(id).or_default().push(i);
        }
        let groups: Vec<(u32, Vec<usize>)> =
            by_id.into_iter().filter(|(_, v)| v.len() >= k).collect();
        if p == 0 || k == 0 || groups.len() < p {
            return Err(contract_err!(
                "{} identities have >= {} samples; a {}x{} batch is impossible",
                groups.len(),
                k,
                p,
                k
            ));
        }
        let pools = vec![Vec::new(); groups.len()];
        Ok(Self { groups, pools, p, k })
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    pub fn sample(&mut self, rng: &mut impl Rng) -> PkBatch {
        let chosen = rand::seq::index::sample(rng, self.groups.len(), self.p);
        let mut indices = Vec::with_capacity(self.p * self.k);
        let mut identities = Vec::with_capacity(self.p * self.k);
        for g in chosen.iter() {
            let pool = &mut self.pools[g];
            if pool.len() < self.k {
                let mut fresh = self.groups[g].1.clone();
                fresh.shuffle(rng);
                // Leftovers are dealt first so no sample is skipped for long.
                fresh.retain(|i| !pool.contains(i));
                pool.splice(0..0, fresh);
            }
            for _ in 0..self.k {
                indices.push(pool.pop().expect("pool refilled"));
                identities.push(self.groups[g].0);
            }
        }
        PkBatch { indices, identities }
    }
}

/// One PK batch from a fresh sampler.
pub fn pk_sample(identities: &[u32], p: usize, k: usize, rng: &mut impl Rng) -> Result<PkBatch> {
    Ok(PkSampler::new(identities, p, k)?.sample(rng))
}

/// Stacks sample images into `[B, C, H, W]`.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<Vec<usize>> = None;
    let mut count = 0;
    for s in samples {
        match &dims {
            None => dims = Some(s.image.dims().to_vec()),
            Some(d) if d.as_slice() != s.image.dims() => {
                return Err(contract_err!("mixed image dims {:?} and {:?}", d, s.image.dims()))
            }
            _ => {}
        }
        data.extend_from_slice(s.image.data());
        count += 1;
    }
    let dims = dims.ok_or_else(|| contract_err!("no images to stack"))?;
    let mut full = vec![count];
    full.extend(dims);
    Tensor::new(full, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_id_below_two_rejected() {
        assert!(generate_synthetic(0..3, 1, 48, 16, 0).is_err());
    }

    #[test]
    fn cameras_round_robin() {
        let s = generate_synthetic(0..1, 6, 48, 16, 0).unwrap();
        let cams: Vec<u32> = s.iter().map(|s| s.camera).collect();
        assert_eq!(cams, vec![0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn splits_are_disjoint_and_queries_covered() {
        for seed in 0..5 {
            let ds = Dataset::synthetic(&SyntheticSpec::default(), seed).unwrap();
            let ids = |sp: Split| -> std::collections::BTreeSet<u32> {
                ds.split(sp).iter().map(|s| s.identity).collect()
            };
            let (tr, q, g) = (ids(Split::Train), ids(Split::Query), ids(Split::Gallery));
            assert!(tr.is_disjoint(&q) && tr.is_disjoint(&g));
            assert!(q.is_subset(&g));
        }
    }

    #[test]
    fn sampler_batches_are_pk() {
        let ids: Vec<u32> = (0..10).flat_map(|i| [i; 5]).collect();
        let mut sampler = PkSampler::new(&ids, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = sampler.sample(&mut rng);
            assert_eq!(b.indices.len(), 12);
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for (&i, &id) in b.indices.iter().zip(&b.identities) {
                assert_eq!(ids[i], id);
                *counts.entry(id).or_default() += 1;
            }
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|&c| c == 3));
            let unique: std::collections::BTreeSet<_> = b.indices.iter().collect();
            assert_eq!(unique.len(), 12);
        }
    }

    #[test]
    fn sampler_rejects_insufficient_pool() {
        let ids: Vec<u32> = vec![0, 0, 1, 1, 2];
        assert!(PkSampler::new(&ids, 3, 2).is_err());
        assert!(PkSampler::new(&ids, 2, 2).is_ok());
    }

    #[test]
    fn bad_magic_rejected() {
        let err = Dataset::read_from(&b"NOTADS1\0\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
