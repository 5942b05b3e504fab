//! Capture of word-to-latent cross-attention and its aggregation over
//! layers, words and timesteps.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3, ArrayView2};

use crate::diffusion::{Conditioning, DenoiseHook, NoisePredictor, RegionKey};
use crate::error::{Error, Result};
use crate::ops::bilinear_resize;
use crate::text::WordSpan;

/// Attention of every word at one layer and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttentionRecord {
    /// 1-based layer index.
    pub layer: usize,
    pub timestep: usize,
    /// words x height x width
    pub maps: Array3<f32>,
}

impl LayerAttentionRecord {
    pub fn words(&self) -> usize {
        self.maps.dim().0
    }

    /// `(height, width)`
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    /// Map of a 1-based word index.
    pub fn word_map(&self, word: usize) -> Option<ArrayView2<'_, f32>> {
        (word >= 1 && word <= self.words()).then(|| self.maps.slice(s![word - 1, .., ..]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Word(usize),
    Region(RegionKey),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordAttentionMap {
    pub source: MapSource,
    pub values: Array2<f32>,
    pub timesteps: BTreeSet<usize>,
}

/// Per-layer word maps replayed in place of live attention at every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFixture {
    /// One `words x h x w` tensor per layer, layer 1 first.
    pub layers: Vec<Array3<f32>>,
}

impl AttentionFixture {
    pub fn new(layers: Vec<Array3<f32>>) -> Self {
        Self { layers }
    }

    /// Same maps at every layer.
    pub fn uniform(maps: Array3<f32>, num_layers: usize) -> Self {
        Self::new(vec![maps; num_layers])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn words(&self) -> usize {
        self.layers.first().map_or(0, |m| m.dim().0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeMode {
    Disabled,
    Record,
    Inject(AttentionFixture),
}

/// Collects one record per cross-attention layer per conditional pass.
///
/// The probe only observes; it never alters the values flowing through the
/// denoiser. In inject mode the emitted records are the fixture's maps.
#[derive(Debug, Clone)]
pub struct Probe {
    mode: ProbeMode,
    records: Vec<LayerAttentionRecord>,
}

impl Probe {
    pub fn disabled() -> Self {
        Self::with_mode(ProbeMode::Disabled)
    }

    pub fn recording() -> Self {
        Self::with_mode(ProbeMode::Record)
    }

    pub fn injecting(fixture: AttentionFixture) -> Self {
        Self::with_mode(ProbeMode::Inject(fixture))
    }

    pub fn with_mode(mode: ProbeMode) -> Self {
        Self { mode, records: Vec::new() }
    }

    pub fn is_enabled(&self) -> bool {
        self.mode != ProbeMode::Disabled
    }

    pub fn records(&self) -> Result<&[LayerAttentionRecord]> {
        if !self.is_enabled() {
            return Err(Error::ProbeDisabled);
        }
        Ok(&self.records)
    }

    pub fn take_records(&mut self) -> Result<Vec<LayerAttentionRecord>> {
        if !self.is_enabled() {
            return Err(Error::ProbeDisabled);
        }
        Ok(std::mem::take(&mut self.records))
    }
}

impl DenoiseHook for Probe {
    fn wants_attention(&self) -> bool {
        self.is_enabled()
    }

    fn on_attention(&mut self, layer: usize, timestep: usize, size: (usize, usize), probs: &Array2<f32>) {
        let maps = match &self.mode {
            ProbeMode::Disabled => return,
            ProbeMode::Record => {
                let (h, w) = size;
                let words = probs.ncols();
                Array3::from_shape_fn((words, h, w), |(i, y, x)| probs[[y * w + x, i]])
            }
            ProbeMode::Inject(fixture) => match fixture.layers.get(layer - 1) {
                Some(m) => m.clone(),
                None => return,
            },
        };
        self.records.push(LayerAttentionRecord { layer, timestep, maps });
    }
}

/// Runs one conditional denoiser pass and returns the records it emitted.
pub fn record_layer_attention(
    model: &dyn NoisePredictor,
    latent: &Array3<f32>,
    timestep: usize,
    cond: &Conditioning,
    probe: &mut Probe,
) -> Result<Vec<LayerAttentionRecord>> {
    if !probe.is_enabled() {
        return Err(Error::ProbeDisabled);
    }
    model.predict_noise(latent, timestep, cond, probe)?;
    probe.take_records()
}

/// Sum over layers of one word's maps, each resized bilinearly to `size`.
///
/// Records are summed in (layer, timestep) order, so the result does not
/// depend on the order they are passed in.
pub fn aggregate_layers(records: &[&LayerAttentionRecord], word: usize, size: (usize, usize)) -> Result<WordAttentionMap> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut ordered: Vec<&LayerAttentionRecord> = records.to_vec();
    ordered.sort_by_key(|r| (r.layer, r.timestep));
    let mut sum = Array2::<f32>::zeros(size);
    let mut timesteps = BTreeSet::new();
    for r in ordered {
        let map = r
            .word_map(word)
            .ok_or_else(|| Error::InvalidParameter(format!("word {word} outside record of {} words", r.words())))?;
        sum += &bilinear_resize(map, size.0, size.1);
        timesteps.insert(r.timestep);
    }
    Ok(WordAttentionMap {
        source: MapSource::Word(word),
        values: sum,
        timesteps,
    })
}

/// Pointwise maximum over the word maps inside the inclusive span.
pub fn aggregate_region(word_maps: &[WordAttentionMap], span: WordSpan, key: RegionKey) -> Result<WordAttentionMap> {
    aggregate_region_spans(word_maps, &[span], key)
}

/// Pointwise maximum over the word maps inside any of the spans.
pub fn aggregate_region_spans(word_maps: &[WordAttentionMap], spans: &[WordSpan], key: RegionKey) -> Result<WordAttentionMap> {
    let selected: Vec<&WordAttentionMap> = word_maps
        .iter()
        .filter(|m| matches!(m.source, MapSource::Word(i) if spans.iter().any(|s| s.contains(i))))
        .collect();
    let first = selected.first().ok_or(Error::EmptySpan)?;
    let mut values = first.values.clone();
    let mut timesteps = first.timesteps.clone();
    for m in &selected[1..] {
        if m.values.dim() != values.dim() {
            let (a, b) = values.dim();
            let (c, d) = m.values.dim();
            return Err(Error::shape(&[a, b], &[c, d]));
        }
        values.zip_mut_with(&m.values, |v, &o| *v = v.max(o));
        timesteps.extend(m.timesteps.iter().copied());
    }
    Ok(WordAttentionMap {
        source: MapSource::Region(key),
        values,
        timesteps,
    })
}

/// Arithmetic mean of the maps whose timesteps all fall in `[lo, hi]`.
pub fn aggregate_timesteps(maps: &[WordAttentionMap], window: (usize, usize)) -> Result<WordAttentionMap> {
    let (lo, hi) = window;
    let mut selected: Vec<&WordAttentionMap> = maps
        .iter()
        .filter(|m| !m.timesteps.is_empty() && m.timesteps.iter().all(|t| (lo..=hi).contains(t)))
        .collect();
    selected.sort_by_key(|m| m.timesteps.iter().next().copied());
    let first = selected.first().ok_or(Error::EmptyWindow { lo, hi })?;
    let mut sum = Array2::<f32>::zeros(first.values.dim());
    let mut timesteps = BTreeSet::new();
    for m in &selected {
        if m.values.dim() != sum.dim() {
            let (a, b) = sum.dim();
            let (c, d) = m.values.dim();
            return Err(Error::shape(&[a, b], &[c, d]));
        }
        sum += &m.values;
        timesteps.extend(m.timesteps.iter().copied());
    }
    let n = selected.len() as f32;
    sum.mapv_inplace(|v| v / n);
    Ok(WordAttentionMap {
        source: first.source,
        values: sum,
        timesteps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::RegionLabel;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn record(layer: usize, timestep: usize, maps: Array3<f32>) -> LayerAttentionRecord {
        LayerAttentionRecord { layer, timestep, maps }
    }

    fn word(i: usize, values: Array2<f32>, t: usize) -> WordAttentionMap {
        WordAttentionMap {
            source: MapSource::Word(i),
            values,
            timesteps: [t].into(),
        }
    }

    fn key() -> RegionKey {
        RegionKey::new(1, RegionLabel::Face)
    }

    #[test]
    fn single_layer_is_resized_copy() {
        let m = Array3::from_shape_fn((2, 4, 4), |(w, y, x)| (w * 16 + y * 4 + x) as f32);
        let r = record(1, 3, m.clone());
        let out = aggregate_layers(&[&r], 2, (4, 4)).unwrap();
        assert_eq!(out.values, m.slice(s![1, .., ..]));
        assert_eq!(out.timesteps, [3].into());
    }

    #[test]
    fn identical_layers_double() {
        let m = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| (y + x) as f32 * 0.1);
        let (a, b) = (record(1, 0, m.clone()), record(2, 0, m.clone()));
        let out = aggregate_layers(&[&a, &b], 1, (3, 3)).unwrap();
        assert_eq!(out.values, m.slice(s![0, .., ..]).mapv(|v| v * 2.0));
    }

    #[test]
    fn mixed_resolutions_use_bilinear() {
        let coarse = record(2, 0, array![[[0.0f32, 4.0], [8.0, 12.0]]]);
        let fine = record(1, 0, Array3::from_elem((1, 4, 4), 1.0));
        let out = aggregate_layers(&[&coarse, &fine], 1, (4, 4)).unwrap();
        // coarse samples at clamped half-pixel positions -0.25, 0.25, 0.75, 1.25
        let w = [0.0f32, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let expected = 1.0 + 4.0 * w[x] + 8.0 * w[y];
                assert!((out.values[[y, x]] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(aggregate_layers(&[], 1, (2, 2)), Err(Error::EmptyRecords)));
        assert!(matches!(aggregate_region(&[], WordSpan::new(1, 2), key()), Err(Error::EmptySpan)));
        assert!(matches!(aggregate_timesteps(&[word(1, Array2::zeros((2, 2)), 15)], (0, 10)), Err(Error::EmptyWindow { .. })));
    }

    #[test]
    fn region_max_example() {
        let maps = vec![word(1, array![[0.1f32, 0.5], [0.3, 0.2]], 0), word(2, array![[0.4f32, 0.2], [0.1, 0.6]], 0)];
        let out = aggregate_region(&maps, WordSpan::new(1, 2), key()).unwrap();
        assert_eq!(out.values, array![[0.4, 0.5], [0.3, 0.6]]);
        let single = aggregate_region(&maps, WordSpan::new(2, 2), key()).unwrap();
        assert_eq!(single.values, maps[1].values);
    }

    #[test]
    fn region_max_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let u = Uniform::new(0.0f32, 1.0).unwrap();
        let maps: Vec<_> = (1..=5)
            .map(|i| word(i, Array2::from_shape_simple_fn((8, 8), || u.sample(&mut rng)), 0))
            .collect();
        let out = aggregate_region(&maps, WordSpan::new(2, 4), key()).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let mut best = f32::MIN;
                for m in &maps[1..4] {
                    if m.values[[y, x]] > best {
                        best = m.values[[y, x]];
                    }
                }
                assert_eq!(out.values[[y, x]], best);
            }
        }
    }

    #[test]
    fn timestep_mean() {
        let maps = vec![word(1, Array2::from_elem((2, 2), 1.0), 4), word(1, Array2::from_elem((2, 2), 3.0), 6)];
        let out = aggregate_timesteps(&maps, (0, 10)).unwrap();
        assert!(out.values.iter().all(|&v| v == 2.0));
        let one = aggregate_timesteps(&maps, (5, 6)).unwrap();
        assert_eq!(one.values, maps[1].values);
        let same = vec![word(1, Array2::from_elem((2, 2), 0.3), 1), word(1, Array2::from_elem((2, 2), 0.3), 2)];
        assert_eq!(aggregate_timesteps(&same, (0, 2)).unwrap().values, same[0].values);
    }

    #[test]
    fn disabled_probe_refuses() {
        let mut p = Probe::disabled();
        assert!(matches!(p.take_records(), Err(Error::ProbeDisabled)));
        p.on_attention(1, 0, (1, 1), &Array2::ones((1, 1)));
        assert!(p.records.is_empty());
    }

    #[test]
    fn inject_mode_replays_fixture() {
        let fixture = AttentionFixture::new(vec![Array3::from_elem((2, 2, 2), 0.25), Array3::from_elem((2, 1, 1), 0.75)]);
        let mut p = Probe::injecting(fixture.clone());
        p.on_attention(1, 7, (4, 4), &Array2::zeros((16, 3)));
        p.on_attention(2, 7, (2, 2), &Array2::zeros((4, 3)));
        let recs = p.take_records().unwrap();
        assert_eq!(recs[0].maps, fixture.layers[0]);
        assert_eq!(recs[1].maps, fixture.layers[1]);
        assert_eq!(recs[1].timestep, 7);
    }

    proptest! {
        #[test]
        fn layer_sum_ignores_record_order(seed in 0u64..500, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Uniform::new(0.0f32, 1.0).unwrap();
            let sizes = [4usize, 2, 2, 4];
            let recs: Vec<_> = (0..4).map(|k| record(k + 1, 0, Array3::from_shape_simple_fn((3, sizes[k], sizes[k]), || u.sample(&mut rng)))).collect();
            let a = aggregate_layers(&recs.iter().collect::<Vec<_>>(), 2, (4, 4)).unwrap();
            let shuffled: Vec<&LayerAttentionRecord> = perm.iter().map(|&i| &recs[i]).collect();
            let b = aggregate_layers(&shuffled, 2, (4, 4)).unwrap();
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn region_max_dominates(seed in 0u64..500, words in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Uniform::new(0.0f32, 1.0).unwrap();
            let maps: Vec<_> = (1..=words).map(|i| word(i, Array2::from_shape_simple_fn((5, 5), || u.sample(&mut rng)), 0)).collect();
            let out = aggregate_region(&maps, WordSpan::new(1, words), key()).unwrap();
            for (idx, v) in out.values.indexed_iter() {
                prop_assert!(maps.iter().all(|m| *v >= m.values[idx]));
                prop_assert!(maps.iter().any(|m| *v == m.values[idx]));
            }
        }
    }
}
