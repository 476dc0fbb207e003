//! Descriptors, distances, and frame-to-frame matching.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{CameraIntrinsics, Pose};
use crate::vocabulary::WordId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("descriptor family mismatch: {0} vs {1}")]
    FamilyMismatch(FamilyId, FamilyId),
    #[error("descriptor of family {family} must have {expected} values, got {got}")]
    BadLength { family: FamilyId, expected: usize, got: usize },
    #[error("binary descriptor values must be 0 or 1")]
    NotBinary,
    #[error("NNDR ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("unknown descriptor family {0:?}")]
    UnknownFamily(String),
    #[error("malformed frame record: {0}")]
    Malformed(String),
}

/// Descriptor families, with dimensions and element sizes of the real
/// extractors they stand in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FamilyId {
    Surf,
    Sift,
    Brief,
    Brisk,
    Kaze,
    Freak,
    Daisy,
    SuperPoint,
}

impl FamilyId {
    pub const ALL: [FamilyId; 8] = [
        FamilyId::Surf,
        FamilyId::Sift,
        FamilyId::Brief,
        FamilyId::Brisk,
        FamilyId::Kaze,
        FamilyId::Freak,
        FamilyId::Daisy,
        FamilyId::SuperPoint,
    ];

    pub fn code(self) -> &'static str {
        match self {
            FamilyId::Surf => "SU",
            FamilyId::Sift => "SI",
            FamilyId::Brief => "BF",
            FamilyId::Brisk => "BK",
            FamilyId::Kaze => "KA",
            FamilyId::Freak => "FR",
            FamilyId::Daisy => "DY",
            FamilyId::SuperPoint => "SP",
        }
    }

    pub fn from_code(code: &str) -> Result<FamilyId, FeatureError> {
        FamilyId::ALL
            .into_iter()
            .find(|f| f.code().eq_ignore_ascii_case(code))
            .ok_or_else(|| FeatureError::UnknownFamily(code.to_string()))
    }

    pub fn dimension(self) -> usize {
        match self {
            FamilyId::Surf => 64,
            FamilyId::Sift => 128,
            FamilyId::Brief => 32,
            FamilyId::Brisk => 64,
            FamilyId::Kaze => 64,
            FamilyId::Freak => 64,
            FamilyId::Daisy => 200,
            FamilyId::SuperPoint => 256,
        }
    }

    pub fn bytes_per_element(self) -> usize {
        if self.is_binary() {
            1
        } else {
            4
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, FamilyId::Brief | FamilyId::Brisk | FamilyId::Freak)
    }

    fn words(self) -> usize {
        self.dimension().div_ceil(64)
    }
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for FamilyId {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FamilyId::from_code(s)
    }
}

impl Serialize for FamilyId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for FamilyId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        FamilyId::from_code(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorData {
    Real(Vec<f32>),
    /// Bits packed little-endian into 64-bit words.
    Binary(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    family: FamilyId,
    data: DescriptorData,
}

impl Descriptor {
    pub fn real(family: FamilyId, values: Vec<f32>) -> Result<Self, FeatureError> {
        if family.is_binary() {
            return Self::from_values(family, &values);
        }
        if values.len() != family.dimension() {
            return Err(FeatureError::BadLength {
                family,
                expected: family.dimension(),
                got: values.len(),
            });
        }
        Ok(Self {
            family,
            data: DescriptorData::Real(values),
        })
    }

    /// Builds a descriptor from plain values; binary families require 0/1.
    pub fn from_values(family: FamilyId, values: &[f32]) -> Result<Self, FeatureError> {
        if values.len() != family.dimension() {
            return Err(FeatureError::BadLength {
                family,
                expected: family.dimension(),
                got: values.len(),
            });
        }
        if !family.is_binary() {
            return Self::real(family, values.to_vec());
        }
        let mut words = vec![0u64; family.words()];
        for (i, &v) in values.iter().enumerate() {
            if v == 1.0 {
                words[i / 64] |= 1 << (i % 64);
            } else if v != 0.0 {
                return Err(FeatureError::NotBinary);
            }
        }
        Ok(Self {
            family,
            data: DescriptorData::Binary(words),
        })
    }

    pub fn from_bits(family: FamilyId, bits: &[bool]) -> Result<Self, FeatureError> {
        let values: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::from_values(family, &values)
    }

    /// Wraps raw data whose length already matches the family.
    pub(crate) fn from_data(family: FamilyId, data: DescriptorData) -> Self {
        debug_assert_eq!(
            match &data {
                DescriptorData::Real(v) => v.len(),
                DescriptorData::Binary(w) => w.len() * 64,
            },
            if family.is_binary() { family.words() * 64 } else { family.dimension() }
        );
        Self { family, data }
    }

    pub fn zeros(family: FamilyId) -> Self {
        let data = if family.is_binary() {
            DescriptorData::Binary(vec![0; family.words()])
        } else {
            DescriptorData::Real(vec![0.0; family.dimension()])
        };
        Self { family, data }
    }

    pub fn family(&self) -> FamilyId {
        self.family
    }

    pub fn data(&self) -> &DescriptorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.family.dimension()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f32> {
        match &self.data {
            DescriptorData::Real(v) => v.clone(),
            DescriptorData::Binary(w) => (0..self.len())
                .map(|i| ((w[i / 64] >> (i % 64)) & 1) as f32)
                .collect(),
        }
    }

    pub fn as_real(&self) -> Option<&[f32]> {
        match &self.data {
            DescriptorData::Real(v) => Some(v),
            DescriptorData::Binary(_) => None,
        }
    }

    /// Distance without family checks; callers guarantee a shared family.
    #[inline]
    pub(crate) fn raw_distance(&self, other: &Descriptor) -> f32 {
        match (&self.data, &other.data) {
            (DescriptorData::Real(a), DescriptorData::Real(b)) => squared_l2(a, b).sqrt(),
            (DescriptorData::Binary(a), DescriptorData::Binary(b)) => {
                a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>() as f32
            }
            _ => f32::INFINITY,
        }
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match &self.data {
            DescriptorData::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            DescriptorData::Binary(w) => w.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_bytes(family: FamilyId, bytes: &[u8]) -> Descriptor {
        let data = if family.is_binary() {
            DescriptorData::Binary(
                bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            DescriptorData::Real(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        Descriptor { family, data }
    }

    fn byte_len(family: FamilyId) -> usize {
        if family.is_binary() {
            family.words() * 8
        } else {
            family.dimension() * 4
        }
    }
}

pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent lanes over exact chunks let the compiler vectorize.
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Euclidean distance for real families, Hamming distance for binary ones.
pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> Result<f64, FeatureError> {
    if a.family != b.family {
        return Err(FeatureError::FamilyMismatch(a.family, b.family));
    }
    Ok(a.raw_distance(b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub pixel: Vector2<f64>,
    /// Meters; zero when unknown.
    pub depth: f64,
}

impl Keypoint {
    pub fn new(pixel: Vector2<f64>, depth: f64) -> Self {
        Self { pixel, depth }
    }

    pub fn has_depth(&self) -> bool {
        self.depth > 0.0
    }
}

/// One camera observation: keypoints with parallel descriptors and word ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FrameRecord", into = "FrameRecord")]
pub struct FeatureFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub family: FamilyId,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    pub word_ids: Vec<Option<WordId>>,
}

impl FeatureFrame {
    pub fn new(frame_id: u64, timestamp: f64, family: FamilyId) -> Self {
        Self {
            frame_id,
            timestamp,
            family,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            word_ids: Vec::new(),
        }
    }

    pub fn push(&mut self, keypoint: Keypoint, descriptor: Descriptor) {
        debug_assert_eq!(descriptor.family(), self.family);
        self.keypoints.push(keypoint);
        self.descriptors.push(descriptor);
        self.word_ids.push(None);
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn point3(&self, index: usize, k: &CameraIntrinsics) -> Option<Vector3<f64>> {
        let kp = &self.keypoints[index];
        k.back_project(&kp.pixel, kp.depth).ok()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.descriptors.len() != self.keypoints.len() || self.word_ids.len() != self.keypoints.len() {
            return Err(FeatureError::Malformed("parallel lists differ in length".into()));
        }
        if let Some(d) = self.descriptors.iter().find(|d| d.family() != self.family) {
            return Err(FeatureError::FamilyMismatch(self.family, d.family()));
        }
        if self.keypoints.iter().any(|k| k.depth < 0.0 || !k.depth.is_finite()) {
            return Err(FeatureError::Malformed("negative depth".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    id: u64,
    t: f64,
    family: FamilyId,
    /// Flattened `[u, v, depth]` triples.
    kp: Vec<f64>,
    /// Base64 of the concatenated little-endian descriptor payloads.
    desc: String,
    /// Word id per feature, -1 when unassigned.
    words: Vec<i64>,
}

impl From<FeatureFrame> for FrameRecord {
    fn from(f: FeatureFrame) -> Self {
        let mut bytes = Vec::with_capacity(f.len() * Descriptor::byte_len(f.family));
        f.descriptors.iter().for_each(|d| d.write_bytes(&mut bytes));
        FrameRecord {
            id: f.frame_id,
            t: f.timestamp,
            family: f.family,
            kp: f.keypoints.iter().flat_map(|k| [k.pixel.x, k.pixel.y, k.depth]).collect(),
            desc: B64.encode(bytes),
            words: f.word_ids.iter().map(|w| w.map_or(-1, |w| w.0 as i64)).collect(),
        }
    }
}

impl TryFrom<FrameRecord> for FeatureFrame {
    type Error = FeatureError;
    fn try_from(r: FrameRecord) -> Result<Self, Self::Error> {
        if r.kp.len() % 3 != 0 {
            return Err(FeatureError::Malformed("keypoint array not a multiple of 3".into()));
        }
        let n = r.kp.len() / 3;
        let bytes = B64.decode(r.desc.as_bytes()).map_err(|e| FeatureError::Malformed(e.to_string()))?;
        let bl = Descriptor::byte_len(r.family);
        if bytes.len() != n * bl || r.words.len() != n {
            return Err(FeatureError::Malformed("descriptor payload size mismatch".into()));
        }
        let frame = FeatureFrame {
            frame_id: r.id,
            timestamp: r.t,
            family: r.family,
            keypoints: r
                .kp
                .chunks_exact(3)
                .map(|c| Keypoint::new(Vector2::new(c[0], c[1]), c[2]))
                .collect(),
            descriptors: bytes.chunks_exact(bl).map(|c| Descriptor::read_bytes(r.family, c)).collect(),
            word_ids: r
                .words
                .iter()
                .map(|&w| (w >= 0).then_some(WordId(w as u32)))
                .collect(),
        };
        frame.validate()?;
        Ok(frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Nearest and second-nearest candidate for one query, ties broken by lower index.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TwoNearest {
    pub best: Option<(usize, f32)>,
    pub second: Option<(usize, f32)>,
}

impl TwoNearest {
    pub fn new() -> Self {
        Self { best: None, second: None }
    }

    #[inline]
    pub fn offer(&mut self, index: usize, d: f32) {
        match self.best {
            Some((bi, bd)) if d < bd || (d == bd && index < bi) => {
                self.second = self.best;
                self.best = Some((index, d));
            }
            None => self.best = Some((index, d)),
            _ => match self.second {
                Some((si, sd)) if !(d < sd || (d == sd && index < si)) => {}
                _ => self.second = Some((index, d)),
            },
        }
    }

    pub fn passes_ratio(&self, ratio: f64) -> bool {
        match (self.best, self.second) {
            (Some((_, d1)), Some((_, d2))) => (d1 as f64) < ratio * d2 as f64,
            _ => false,
        }
    }
}

fn check_ratio(ratio: f64) -> Result<(), FeatureError> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(FeatureError::InvalidRatio(ratio))
    }
}

/// Keeps, for every target index, only the smallest-distance claimant;
/// the ratio test is applied to the survivors afterwards so that lowering the
/// ratio can only remove matches.
fn resolve_one_to_one(claims: Vec<(usize, TwoNearest)>, ratio: f64, n_b: usize) -> Vec<Match> {
    let mut winner: Vec<Option<(usize, f32, bool)>> = vec![None; n_b];
    for (i, nn) in &claims {
        let Some((j, d)) = nn.best else { continue };
        let pass = nn.passes_ratio(ratio);
        match winner[j] {
            Some((wi, wd, _)) if wd < d || (wd == d && wi < *i) => {}
            _ => winner[j] = Some((*i, d, pass)),
        }
    }
    let mut out: Vec<Match> = winner
        .iter()
        .enumerate()
        .filter_map(|(j, w)| match w {
            Some((i, d, true)) => Some(Match {
                index_a: *i,
                index_b: j,
                distance: *d as f64,
            }),
            _ => None,
        })
        .collect();
    out.sort_by_key(|m| m.index_a);
    out
}

/// Nearest-neighbor distance ratio matching of every descriptor of `a`
/// against all of `b`, made one-to-one.
pub fn nndr_match(a: &FeatureFrame, b: &FeatureFrame, ratio: f64) -> Result<Vec<Match>, FeatureError> {
    if a.family != b.family {
        return Err(FeatureError::FamilyMismatch(a.family, b.family));
    }
    check_ratio(ratio)?;
    if b.len() < 2 {
        return Ok(Vec::new());
    }
    let claims = a
        .descriptors
        .iter()
        .enumerate()
        .map(|(i, da)| {
            let mut nn = TwoNearest::new();
            for (j, db) in b.descriptors.iter().enumerate() {
                nn.offer(j, da.raw_distance(db));
            }
            (i, nn)
        })
        .collect();
    Ok(resolve_one_to_one(claims, ratio, b.len()))
}

/// Projects every 3D feature of `a` into `b` with `transform_ab`
/// (camera-b-from-camera-a) and matches it against `b`'s keypoints inside a
/// square window of half-side `window_px`. A lone candidate in the window is
/// accepted; with two or more the ratio test applies.
pub fn guided_match(
    a: &FeatureFrame,
    b: &FeatureFrame,
    transform_ab: &Pose,
    k: &CameraIntrinsics,
    window_px: f64,
    ratio: f64,
) -> Vec<Match> {
    if a.family != b.family || window_px <= 0.0 || check_ratio(ratio).is_err() {
        return Vec::new();
    }
    let mut claims = Vec::new();
    for i in 0..a.len() {
        let Some(p) = a.point3(i, k) else { continue };
        let Ok(u) = k.project(&transform_ab.transform_point(&p)) else {
            continue;
        };
        let mut nn = TwoNearest::new();
        for (j, kb) in b.keypoints.iter().enumerate() {
            let d = kb.pixel - u;
            if d.x.abs() <= window_px && d.y.abs() <= window_px {
                nn.offer(j, a.descriptors[i].raw_distance(&b.descriptors[j]));
            }
        }
        if nn.best.is_some() {
            if nn.second.is_none() {
                // Lone candidate: nothing to compare against.
                nn.second = Some((usize::MAX, f32::INFINITY));
            }
            claims.push((i, nn));
        }
    }
    resolve_one_to_one(claims, ratio, b.len())
}
