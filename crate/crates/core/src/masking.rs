//! Band-shaped attention masks over the concatenated `source ++ target`
//! sequence.
//!
//! Source queries see a window centered on themselves, restricted to the
//! source block. Target queries see the `window` most recent positions
//! (themselves included), which may reach back into the source block under
//! [`BoundaryPolicy::Cross`]. An infinite window recovers the unconstrained
//! joint model: full source for source rows, causal over the whole prefix
//! for target rows.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Mask;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("attention window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("source block must hold at least one position")]
    EmptySource,
    #[error("batch row {row}: length {len} exceeds block extent {extent}")]
    LengthExceedsBlock { row: usize, len: usize, extent: usize },
    #[error("source and target length lists differ: {src} vs {tgt} rows")]
    RowCountMismatch { src: usize, tgt: usize },
    #[error("mask shapes disagree: band {band:?}, padding {padding:?}")]
    ShapeMismatch { band: Vec<usize>, padding: Vec<usize> },
    #[error("invalid window `{0}`: expected an odd positive integer or `inf`")]
    Parse(String),
}

/// Attention receptive field width for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Window {
    Finite(usize),
    Inf,
}

impl Window {
    pub fn finite(w: usize) -> Result<Self, MaskError> {
        if w % 2 == 0 {
            Err(MaskError::EvenWindow(w))
        } else {
            Ok(Window::Finite(w))
        }
    }

    pub fn validate(self) -> Result<Self, MaskError> {
        match self {
            Window::Finite(w) => Window::finite(w),
            Window::Inf => Ok(self),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Finite(w) => write!(f, "{w}"),
            Window::Inf => f.write_str("inf"),
        }
    }
}

impl FromStr for Window {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") {
            return Ok(Window::Inf);
        }
        let w: usize = s.parse().map_err(|_| MaskError::Parse(s.to_string()))?;
        if w == 0 {
            return Err(MaskError::Parse(s.to_string()));
        }
        Window::finite(w)
    }
}

impl Serialize for Window {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Window::Finite(w) => s.serialize_u64(*w as u64),
            Window::Inf => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(n) => Window::finite(n as usize).map_err(serde::de::Error::custom),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Parses a comma-separated window list such as `3,5,7,inf`.
pub fn parse_windows(s: &str) -> Result<Vec<Window>, MaskError> {
    s.split(',').map(str::parse).collect()
}

/// How a target query's band treats the source/target boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// The band counts positions on the concatenated axis and may span the
    /// boundary into the source tail.
    #[default]
    Cross,
    /// Target queries always see the whole source block; the band only
    /// limits target keys.
    ClipFullSource,
}

impl FromStr for BoundaryPolicy {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, MaskError> {
        match s {
            "cross" => Ok(BoundaryPolicy::Cross),
            "clip_full_source" | "clip-full-source" => Ok(BoundaryPolicy::ClipFullSource),
            _ => Err(MaskError::Parse(format!("unknown boundary policy {s:?}"))),
        }
    }
}

/// Which end of a block holds the padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadSide {
    Left,
    Right,
}

impl fmt::Display for BoundaryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryPolicy::Cross => "cross",
            BoundaryPolicy::ClipFullSource => "clip_full_source",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BandSpec {
    pub window: Window,
    pub source_len: usize,
    pub target_len: usize,
    pub policy: BoundaryPolicy,
}

impl BandSpec {
    pub fn new(window: Window, source_len: usize, target_len: usize) -> Self {
        Self {
            window,
            source_len,
            target_len,
            policy: BoundaryPolicy::Cross,
        }
    }

    pub fn with_policy(mut self, policy: BoundaryPolicy) -> Self {
        self.policy = policy;
        self
    }
}

/// Builds the `(S+T)×(S+T)` band mask for one layer.
pub fn build_band_mask(spec: BandSpec) -> Result<Mask, MaskError> {
    spec.window.validate()?;
    let s = spec.source_len;
    if s == 0 {
        return Err(MaskError::EmptySource);
    }
    let n = s + spec.target_len;
    let mut data = vec![false; n * n];
    for q in 0..n {
        let (lo, hi) = allowed_range(spec, q);
        data[q * n + lo..=q * n + hi].iter_mut().for_each(|x| *x = true);
        if q >= s && spec.policy == BoundaryPolicy::ClipFullSource {
            data[q * n..q * n + s].iter_mut().for_each(|x| *x = true);
        }
    }
    Ok(Mask::new(&[n, n], data).expect("square mask"))
}

/// Contiguous key range `[lo, hi]` of the band for query `q`. Under
/// `ClipFullSource` target rows additionally see all of the source block.
fn allowed_range(spec: BandSpec, q: usize) -> (usize, usize) {
    let s = spec.source_len;
    if q < s {
        match spec.window {
            Window::Inf => (0, s - 1),
            Window::Finite(w) => {
                let half = w / 2;
                (q.saturating_sub(half), (q + half).min(s - 1))
            }
        }
    } else {
        let floor = match spec.policy {
            BoundaryPolicy::Cross => 0,
            BoundaryPolicy::ClipFullSource => s,
        };
        match spec.window {
            Window::Inf => (0, q),
            Window::Finite(w) => ((q + 1).saturating_sub(w).max(floor), q),
        }
    }
}

/// Key-side validity per batch row: `true` on real (non-pad) columns.
/// The target block is right-padded; the source block is padded on
/// `source_side`. Output shape `[B, S+T]`.
pub fn build_padding_mask(
    src_lengths: &[usize],
    tgt_lengths: &[usize],
    source_len: usize,
    target_len: usize,
    source_side: PadSide,
) -> Result<Mask, MaskError> {
    if src_lengths.len() != tgt_lengths.len() {
        return Err(MaskError::RowCountMismatch {
            src: src_lengths.len(),
            tgt: tgt_lengths.len(),
        });
    }
    let n = source_len + target_len;
    let mut data = vec![false; src_lengths.len() * n];
    for (row, (&sl, &tl)) in src_lengths.iter().zip(tgt_lengths).enumerate() {
        if sl > source_len {
            return Err(MaskError::LengthExceedsBlock {
                row,
                len: sl,
                extent: source_len,
            });
        }
        if tl > target_len {
            return Err(MaskError::LengthExceedsBlock {
                row,
                len: tl,
                extent: target_len,
            });
        }
        let r = &mut data[row * n..(row + 1) * n];
        let start = match source_side {
            PadSide::Right => 0,
            PadSide::Left => source_len - sl,
        };
        r[start..start + sl].iter_mut().for_each(|x| *x = true);
        r[source_len..source_len + tl].iter_mut().for_each(|x| *x = true);
    }
    Ok(Mask::new(&[src_lengths.len(), n], data).expect("padding mask shape"))
}

/// ANDs a band with each row's key padding, then gives every pad query a
/// self-only row. Output shape `[B, 1, N, N]`, which broadcasts over heads.
pub fn combine(band: &Mask, padding: &Mask) -> Result<Mask, MaskError> {
    let bs = band.shape();
    let ps = padding.shape();
    if bs.len() != 2 || ps.len() != 2 || bs[0] != bs[1] || bs[1] != ps[1] {
        return Err(MaskError::ShapeMismatch {
            band: bs.to_vec(),
            padding: ps.to_vec(),
        });
    }
    let (b, n) = (ps[0], ps[1]);
    let bd = band.data();
    let pd = padding.data();
    let mut out = vec![false; b * n * n];
    for row in 0..b {
        let keys = &pd[row * n..(row + 1) * n];
        let block = &mut out[row * n * n..(row + 1) * n * n];
        for q in 0..n {
            let dst = &mut block[q * n..(q + 1) * n];
            if keys[q] {
                for k in 0..n {
                    dst[k] = bd[q * n + k] && keys[k];
                }
            } else {
                dst[q] = true;
            }
        }
    }
    Ok(Mask::new(&[b, 1, n, n], out).expect("combined mask shape"))
}

/// Per-layer attention masks for one batch geometry.
#[derive(Debug, Clone)]
pub struct BandMaskSet {
    pub source_len: usize,
    pub target_len: usize,
    pub batch: usize,
    pub layers: Vec<Arc<Mask>>,
}

/// Memoizes band masks by geometry. Band shape depends only on
/// `(S, T, window, policy)`.
#[derive(Debug, Default)]
pub struct MaskCache {
    bands: HashMap<BandSpec, Arc<Mask>>,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn band(&mut self, spec: BandSpec) -> Result<Arc<Mask>, MaskError> {
        if let Some(m) = self.bands.get(&spec) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(build_band_mask(spec)?);
        self.bands.insert(spec, Arc::clone(&m));
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    /// Builds the combined mask for every layer of a window schedule.
    /// Layers sharing a window share one combined mask.
    pub fn layer_masks(
        &mut self,
        windows: &[Window],
        policy: BoundaryPolicy,
        src_lengths: &[usize],
        tgt_lengths: &[usize],
        source_len: usize,
        target_len: usize,
        source_side: PadSide,
    ) -> Result<BandMaskSet, MaskError> {
        let padding = build_padding_mask(src_lengths, tgt_lengths, source_len, target_len, source_side)?;
        let mut combined: HashMap<Window, Arc<Mask>> = HashMap::new();
        let mut layers = Vec::with_capacity(windows.len());
        for &w in windows {
            let m = match combined.get(&w) {
                Some(m) => Arc::clone(m),
                None => {
                    let band = self.band(BandSpec {
                        window: w,
                        source_len,
                        target_len,
                        policy,
                    })?;
                    let m = Arc::new(combine(&band, &padding)?);
                    combined.insert(w, Arc::clone(&m));
                    m
                }
            };
            layers.push(m);
        }
        Ok(BandMaskSet {
            source_len,
            target_len,
            batch: src_lengths.len(),
            layers,
        })
    }
}

/// One line per query row, `#` for allowed keys and `.` for blocked ones.
pub fn render_ascii(mask: &Mask) -> String {
    let n = *mask.shape().last().unwrap_or(&0);
    let mut out = String::with_capacity(mask.data().len() + mask.data().len() / n.max(1));
    for row in mask.data().chunks(n.max(1)) {
        out.extend(row.iter().map(|&ok| if ok { '#' } else { '.' }));
        out.push('\n');
    }
    out
}

/// Binary greyscale PGM (P5): white = allowed, black = blocked.
pub fn write_pgm<W: Write>(mask: &Mask, mut w: W) -> io::Result<()> {
    let s = mask.shape();
    let cols = *s.last().unwrap_or(&0);
    let rows = if cols == 0 { 0 } else { mask.data().len() / cols };
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = mask.data().iter().map(|&ok| if ok { 255 } else { 0 }).collect();
    w.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed_row(m: &Mask, q: usize) -> Vec<usize> {
        let n = m.shape()[1];
        (0..n).filter(|&k| m.data()[q * n + k]).collect()
    }

    #[test]
    fn source_only_window_three() {
        let m = build_band_mask(BandSpec::new(Window::Finite(3), 4, 0)).unwrap();
        assert_eq!(allowed_row(&m, 0), vec![0, 1]);
        assert_eq!(allowed_row(&m, 1), vec![0, 1, 2]);
        assert_eq!(allowed_row(&m, 3), vec![2, 3]);
    }

    #[test]
    fn infinite_window_is_joint_causal() {
        let m = build_band_mask(BandSpec::new(Window::Inf, 2, 2)).unwrap();
        assert_eq!(allowed_row(&m, 0), vec![0, 1]);
        assert_eq!(allowed_row(&m, 2), vec![0, 1, 2]);
        assert_eq!(allowed_row(&m, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn target_band_crosses_boundary() {
        let m = build_band_mask(BandSpec::new(Window::Finite(3), 3, 2)).unwrap();
        assert_eq!(allowed_row(&m, 3), vec![1, 2, 3]);
        assert_eq!(allowed_row(&m, 0), vec![0, 1]);
    }

    #[test]
    fn clip_policy_sees_full_source() {
        let spec = BandSpec::new(Window::Finite(3), 3, 3).with_policy(BoundaryPolicy::ClipFullSource);
        let m = build_band_mask(spec).unwrap();
        assert_eq!(allowed_row(&m, 3), vec![0, 1, 2, 3]);
        assert_eq!(allowed_row(&m, 5), vec![0, 1, 2, 3, 4, 5]);
        let spec = BandSpec::new(Window::Finite(1), 3, 3).with_policy(BoundaryPolicy::ClipFullSource);
        let m = build_band_mask(spec).unwrap();
        assert_eq!(allowed_row(&m, 5), vec![0, 1, 2, 5]);
    }

    #[test]
    fn even_window_rejected() {
        assert_eq!(
            build_band_mask(BandSpec::new(Window::Finite(4), 3, 2)).unwrap_err(),
            MaskError::EvenWindow(4)
        );
        assert!("4".parse::<Window>().is_err());
        assert!("0".parse::<Window>().is_err());
        assert_eq!("inf".parse::<Window>().unwrap(), Window::Inf);
        assert_eq!(
            parse_windows("3,5,inf").unwrap(),
            vec![Window::Finite(3), Window::Finite(5), Window::Inf]
        );
    }

    #[test]
    fn padding_examples() {
        let p = build_padding_mask(&[2], &[1], 3, 2, PadSide::Right).unwrap();
        assert_eq!(p.data(), &[true, true, false, true, false]);
        let p = build_padding_mask(&[3], &[2], 3, 2, PadSide::Right).unwrap();
        assert!(p.data().iter().all(|&x| x));
        let p = build_padding_mask(&[1, 3], &[2, 1], 3, 2, PadSide::Right).unwrap();
        assert_eq!(&p.data()[..5], &[true, false, false, true, true]);
        assert_eq!(&p.data()[5..], &[true, true, true, true, false]);
        let p = build_padding_mask(&[1, 2], &[2, 1], 3, 2, PadSide::Left).unwrap();
        assert_eq!(&p.data()[..5], &[false, false, true, true, true]);
        assert_eq!(&p.data()[5..], &[false, true, true, true, false]);
        assert!(matches!(
            build_padding_mask(&[4], &[1], 3, 2, PadSide::Left),
            Err(MaskError::LengthExceedsBlock { row: 0, len: 4, extent: 3 })
        ));
    }

    #[test]
    fn combine_examples() {
        let band = Mask::all(&[3, 3], true);
        let pad = Mask::all(&[1, 3], true);
        assert!(combine(&band, &pad).unwrap().data().iter().all(|&x| x));

        let band = build_band_mask(BandSpec::new(Window::Finite(3), 3, 2)).unwrap();
        let pad = build_padding_mask(&[2], &[2], 3, 2, PadSide::Right).unwrap();
        let c = combine(&band, &pad).unwrap();
        assert_eq!(c.shape(), &[1, 1, 5, 5]);
        let flat = Mask::new(&[5, 5], c.data().to_vec()).unwrap();
        assert_eq!(allowed_row(&flat, 3), vec![1, 3]);
        // Pad query (source column 2) sees only itself.
        assert_eq!(allowed_row(&flat, 2), vec![2]);
    }

    #[test]
    fn cache_reuses_bands() {
        let mut cache = MaskCache::new();
        let windows = [Window::Finite(3), Window::Finite(3), Window::Inf];
        let set = cache
            .layer_masks(&windows, BoundaryPolicy::Cross, &[2, 3], &[2, 1], 3, 2, PadSide::Left)
            .unwrap();
        assert_eq!(set.layers.len(), 3);
        assert!(Arc::ptr_eq(&set.layers[0], &set.layers[1]));
        assert_eq!(cache.len(), 2);
        cache
            .layer_masks(&windows, BoundaryPolicy::Cross, &[1, 1], &[1, 1], 3, 2, PadSide::Left)
            .unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn ascii_rendering() {
        let m = build_band_mask(BandSpec::new(Window::Finite(3), 4, 0)).unwrap();
        assert_eq!(render_ascii(&m), "##..\n###.\n.###\n..##\n");
        let mut buf = Vec::new();
        write_pgm(&m, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(buf.len(), 11 + 16);
    }
}
