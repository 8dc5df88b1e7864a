//! Conditioned dual-path transformer separator.
//!
//! The forward pass is a chain of stages, each exposed as a function over a
//! [`Tape`] so that training and gradient checks see the same graph:
//!
//! 1. [`encode_time`]: learned strided basis, ReLU, features `[N, L]`.
//! 2. [`spectral_input`] and [`mulca`]: STFT magnitude and its channel
//!    attention weighting, frames aligned with the encoder.
//! 3. [`condition`]: fuses the two into frame-major features `[L, N]`.
//! 4. [`segment`], [`sepformer_stack`], [`mask_head`]: layer norm, 50%
//!    overlapped chunks, intra/inter transformer stacks, gated masks.
//! 5. [`decode`]: masked features back to samples by transposed convolution.
//!
//! Feature tensors are frame-major (`[frames, features]`) everywhere except
//! the encoder output and the MulCA convolution input, which are channel-major.

mod config;
mod params;

use indexmap::IndexMap;

pub use config::{ConSepConfig, Conditioning, FilmActivation};
pub use params::{param_count, param_specs, Init, ModelParams, ParamSpec};

use crate::autodiff::{Float, Padding, Tape, Tensor, Var};
use crate::dsp::{hamming_window, magnitude, stft, MagnitudeSpectrogram, Waveform};
use crate::error::{Error, Result};
use params::unit_prefix;

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Records every parameter as a differentiable leaf.
    pub fn leaves<F: Float>(tape: &mut Tape<F>, params: &ModelParams<F>) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
            .collect();
        Self { vars }
    }

    /// Records every parameter as a constant (inference only).
    pub fn constants<F: Float>(tape: &mut Tape<F>, params: &ModelParams<F>) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.constant(t.clone())))
            .collect();
        Self { vars }
    }

    /// Views a flat `[P]` vector, laid out in [`param_specs`] order, as the
    /// model's parameters. Used to differentiate with respect to all of them
    /// through a single variable.
    pub fn from_flat<F: Float>(tape: &mut Tape<F>, cfg: &ConSepConfig, flat: Var) -> Result<Self> {
        let total = param_count(cfg);
        if tape.shape(flat) != [total] {
            return Err(Error::invalid(format!(
                "flat parameter vector has shape {:?}, expected [{total}]",
                tape.shape(flat)
            )));
        }
        let mut vars = IndexMap::new();
        let mut offset = 0;
        for spec in param_specs(cfg) {
            let part = tape.slice_last(flat, offset, spec.numel())?;
            vars.insert(spec.name.clone(), tape.reshape(part, &spec.shape)?);
            offset += spec.numel();
        }
        Ok(Self { vars })
    }

    /// Binds explicitly chosen variables, for driving single stages.
    pub fn from_vars(vars: IndexMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("model has no parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn linear<F: Float>(&self, tape: &mut Tape<F>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        tape.linear(x, w, Some(b))
    }

    fn layer_norm<F: Float>(&self, tape: &mut Tape<F>, prefix: &str, x: Var) -> Result<Var> {
        let gain = self.get(&format!("{prefix}.gain"))?;
        let bias = self.get(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, gain, bias)
    }
}

fn check_input(cfg: &ConSepConfig, mixture: &Waveform) -> Result<usize> {
    if mixture.sample_rate() != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "mixture sampled at {} Hz, model expects {} Hz",
            mixture.sample_rate(),
            cfg.sample_rate
        )));
    }
    cfg.trimmed_len(mixture.len()).ok_or_else(|| {
        Error::invalid(format!(
            "mixture of {} samples is shorter than one encoder frame ({})",
            mixture.len(),
            cfg.enc_kernel
        ))
    })
}

/// STFT magnitude of the (trimmed) mixture with the configured window, hop
/// and padding. Its frame count equals the encoder's.
pub fn spectral_input(cfg: &ConSepConfig, mixture: &Waveform) -> Result<MagnitudeSpectrogram> {
    let len = check_input(cfg, mixture)?;
    let trimmed = mixture.truncated(len)?;
    let window = hamming_window(cfg.stft_win)?;
    Ok(magnitude(&stft(
        &trimmed,
        &window,
        cfg.stft_hop,
        cfg.stft_pad,
    )?))
}

/// Learned analysis basis: `ReLU(conv1d(x))` with `x: [1, T]`, giving `[N, L]`.
pub fn encode_time<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    x: Var,
) -> Result<Var> {
    let w = p.get("encoder.weight")?;
    let conv = tape.conv1d(x, w, None, cfg.enc_stride, Padding::Valid)?;
    tape.relu(conv)
}

/// Output of the multi-kernel channel attention.
#[derive(Debug, Clone, Copy)]
pub struct MulcaOutput {
    /// Weighted magnitudes, frame-major `[L, F]`.
    pub weighted: Var,
    /// Per-frequency weights in `(0, 1)`, shape `[F]`.
    pub weights: Var,
}

/// Multi-kernel channel attention over frequency bins.
///
/// `xm` is the magnitude spectrogram `[F, L]`, `xm_frames` the same values
/// frame-major `[L, F]`.
pub fn mulca<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    xm: Var,
    xm_frames: Var,
) -> Result<MulcaOutput> {
    let mut pooled = Vec::with_capacity(cfg.mulca_kernels.len());
    for i in 0..cfg.mulca_kernels.len() {
        let w = p.get(&format!("mulca.conv{i}.weight"))?;
        let b = p.get(&format!("mulca.conv{i}.bias"))?;
        let conv = tape.conv1d(xm, w, Some(b), 1, Padding::Same)?;
        let mean = tape.avg_pool_time(conv)?;
        pooled.push(tape.relu(mean)?);
    }
    let stacked = tape.concat(&pooled)?;
    let hidden = p.linear(tape, "mulca.fc1", stacked)?;
    let hidden = tape.relu(hidden)?;
    let logits = p.linear(tape, "mulca.fc2", hidden)?;
    let weights = tape.sigmoid(logits)?;
    let weighted = tape.mul(xm_frames, weights)?;
    Ok(MulcaOutput { weighted, weights })
}

/// FiLM modulation `w = wc + f1(X) * wc + f2(X)` with frame-wise affine maps.
///
/// `wc: [L, N]`, `spectral: [L, F]`.
pub fn film_modulate<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    wc: Var,
    spectral: Var,
) -> Result<Var> {
    let mut scale = p.linear(tape, "film.scale", spectral)?;
    let mut shift = p.linear(tape, "film.shift", spectral)?;
    if cfg.film_activation == FilmActivation::Tanh {
        scale = tape.tanh(scale)?;
        shift = tape.tanh(shift)?;
    }
    let scaled = tape.mul(scale, wc)?;
    let modulated = tape.add(wc, scaled)?;
    tape.add(modulated, shift)
}

/// Fuses encoder features `wc: [L, N]` with spectral features `[L, F]`
/// according to the configured variant. Returns `[L, N]`.
pub fn condition<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    wc: Var,
    spectral: Option<Var>,
) -> Result<Var> {
    let spectral = match (cfg.conditioning, spectral) {
        (Conditioning::None, _) => return Ok(wc),
        (_, Some(s)) => s,
        (c, None) => {
            return Err(Error::invalid(format!(
                "conditioning '{}' needs spectral features",
                c.as_str()
            )))
        }
    };
    if tape.shape(spectral)[0] != tape.shape(wc)[0] {
        return Err(Error::invalid(format!(
            "spectral frames {} differ from encoder frames {}",
            tape.shape(spectral)[0],
            tape.shape(wc)[0]
        )));
    }
    match cfg.conditioning {
        Conditioning::Film => film_modulate(tape, p, cfg, wc, spectral),
        Conditioning::Add => {
            let proj = p.linear(tape, "cond.proj", spectral)?;
            tape.add(wc, proj)
        }
        Conditioning::ConcatLinear => {
            let proj = p.linear(tape, "cond.proj", spectral)?;
            let joint = tape.concat(&[wc, proj])?;
            p.linear(tape, "cond.reduce", joint)
        }
        Conditioning::None => unreachable!("handled above"),
    }
}

/// Layer norm over features, then 50%-overlapped chunks `[S, chunk, N]`.
pub fn segment<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    w: Var,
) -> Result<Var> {
    let normed = p.layer_norm(tape, "norm", w)?;
    tape.chunk(normed, cfg.chunk)
}

/// Sinusoidal positional encoding `[len, width]`: sine on even features,
/// cosine on odd ones.
pub fn positional_encoding<F: Float>(len: usize, width: usize) -> Tensor<F> {
    Tensor::from_fn(&[len, width], |i| {
        let (pos, d) = ((i / width) as f64, i % width);
        let rate = 10000f64.powf(-((d - d % 2) as f64) / width as f64);
        F::of(if d % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        })
    })
}

/// Pre-norm transformer unit on `[batch, seq, N]`:
/// `y = x + MHA(LN(x))`, `z = y + FFW(LN(y))`.
fn transformer_unit<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = p.layer_norm(tape, &format!("{prefix}.ln1"), x)?;
    let q = p.linear(tape, &format!("{prefix}.attn.q"), h)?;
    let k = p.linear(tape, &format!("{prefix}.attn.k"), h)?;
    let v = p.linear(tape, &format!("{prefix}.attn.v"), h)?;
    let a = tape.attention(q, k, v, cfg.heads)?;
    let o = p.linear(tape, &format!("{prefix}.attn.out"), a)?;
    let y = tape.add(x, o)?;
    let h = p.layer_norm(tape, &format!("{prefix}.ln2"), y)?;
    let f = p.linear(tape, &format!("{prefix}.ffw.fc1"), h)?;
    let f = tape.relu(f)?;
    let f = p.linear(tape, &format!("{prefix}.ffw.fc2"), f)?;
    tape.add(y, f)
}

fn transformer_stack<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    repeat: usize,
    stage: &str,
    x: Var,
) -> Result<Var> {
    let seq = tape.shape(x)[1];
    let pe = tape.constant(positional_encoding(seq, cfg.n_basis));
    let mut x = tape.add(x, pe)?;
    for u in 0..cfg.layers {
        x = transformer_unit(tape, p, cfg, &unit_prefix(repeat, stage, u), x)?;
    }
    Ok(x)
}

/// `D` repeats of an intra-chunk stack (attention within each segment)
/// followed by an inter-chunk stack (attention across segments at each
/// within-segment position). Shape-preserving on `[S, chunk, N]`.
pub fn sepformer_stack<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    x: Var,
) -> Result<Var> {
    let mut x = x;
    for r in 0..cfg.repeats {
        x = transformer_stack(tape, p, cfg, r, "intra", x)?;
        let across = tape.swap_leading(x)?;
        let across = transformer_stack(tape, p, cfg, r, "inter", across)?;
        x = tape.swap_leading(across)?;
    }
    Ok(x)
}

/// Projects `[S, chunk, N]` to one nonnegative mask `[L, N]` per source:
/// linear to `K*N`, overlap-add, gated `tanh * sigmoid`, linear, ReLU.
pub fn mask_head<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    y: Var,
    frames: usize,
) -> Result<Vec<Var>> {
    let n = cfg.n_basis;
    let proj = p.linear(tape, "head.proj", y)?;
    let mut masks = Vec::with_capacity(cfg.num_sources);
    for k in 0..cfg.num_sources {
        let seg = tape.slice_last(proj, k * n, n)?;
        let joined = tape.overlap_add(seg, frames)?;
        let a = p.linear(tape, "head.gate_tanh", joined)?;
        let a = tape.tanh(a)?;
        let b = p.linear(tape, "head.gate_sigmoid", joined)?;
        let b = tape.sigmoid(b)?;
        let gated = tape.mul(a, b)?;
        let out = p.linear(tape, "head.out", gated)?;
        masks.push(tape.relu(out)?);
    }
    Ok(masks)
}

/// Learned synthesis: transposed convolution of `mask * w` (`[L, N]` each),
/// giving `[T']` with `T' = (L - 1) * stride + kernel`.
pub fn decode<F: Float>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ConSepConfig,
    mask: Var,
    w: Var,
) -> Result<Var> {
    let masked = tape.mul(mask, w)?;
    let channels = tape.transpose(masked)?;
    let y = tape.conv1d_transpose(channels, p.get("decoder.weight")?, cfg.enc_stride)?;
    let len = tape.shape(y)[1];
    tape.reshape(y, &[len])
}

/// Handles to the intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Source estimates `[K, T']`.
    pub estimates: Var,
    /// One mask `[L, N]` per source.
    pub masks: Vec<Var>,
    /// Encoder output `[N, L]`.
    pub encoded: Var,
    /// Conditioned features `[L, N]`.
    pub features: Var,
    /// MulCA weights `[F]`, when MulCA runs.
    pub spectral_weights: Option<Var>,
    /// Number of mixture samples the estimates cover.
    pub trimmed_len: usize,
}

/// Separator parameters bound to their configuration.
#[derive(Debug, Clone)]
pub struct ConSep<F> {
    config: ConSepConfig,
    params: ModelParams<F>,
}

impl<F: Float> ConSep<F> {
    pub fn new(config: ConSepConfig, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::from_tensors(&config, params.into_tensors())?;
        Ok(Self { config, params })
    }

    pub fn init(config: ConSepConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ConSepConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<F> {
        self.params
    }

    /// Records the full forward pass on `tape`.
    ///
    /// `spectrogram` may carry a precomputed [`spectral_input`] of the same
    /// mixture; it is computed on demand otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams,
        mixture: &Waveform,
        spectrogram: Option<&MagnitudeSpectrogram>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let len = check_input(cfg, mixture)?;
        let x = Tensor::from_f64(&[1, len], &mixture.samples()[..len])?;
        let x = tape.constant(x);
        let encoded = encode_time(tape, p, cfg, x)?;
        let frames = tape.shape(encoded)[1];
        let wc = tape.transpose(encoded)?;

        let mut spectral_weights = None;
        let spectral = if cfg.uses_spectrogram() {
            let owned;
            let spec = match spectrogram {
                Some(s) => s,
                None => {
                    owned = spectral_input(cfg, mixture)?;
                    &owned
                }
            };
            if spec.frames() != frames || spec.freq_bins() != cfg.freq_bins() {
                return Err(Error::invalid(format!(
                    "spectrogram is {}x{}, expected {}x{}",
                    spec.freq_bins(),
                    spec.frames(),
                    cfg.freq_bins(),
                    frames
                )));
            }
            let frame_major = Tensor::from_f64(&[frames, spec.freq_bins()], &spec.transposed())?;
            let xm_frames = tape.constant(frame_major);
            if cfg.uses_mulca() {
                let xm = Tensor::from_f64(&[spec.freq_bins(), frames], spec.values())?;
                let xm = tape.constant(xm);
                let out = mulca(tape, p, cfg, xm, xm_frames)?;
                spectral_weights = Some(out.weights);
                Some(out.weighted)
            } else {
                Some(xm_frames)
            }
        } else {
            None
        };

        let features = condition(tape, p, cfg, wc, spectral)?;
        let chunks = segment(tape, p, cfg, features)?;
        let processed = sepformer_stack(tape, p, cfg, chunks)?;
        let masks = mask_head(tape, p, cfg, processed, frames)?;
        let mut outputs = Vec::with_capacity(masks.len());
        for &m in &masks {
            outputs.push(decode(tape, p, cfg, m, features)?);
        }
        let joined = tape.concat(&outputs)?;
        let estimates = tape.reshape(joined, &[cfg.num_sources, len])?;
        Ok(ForwardPass {
            estimates,
            masks,
            encoded,
            features,
            spectral_weights,
            trimmed_len: len,
        })
    }

    /// Separates `mixture` into `K` waveforms of the trimmed length.
    pub fn separate(&self, mixture: &Waveform) -> Result<Vec<Waveform>> {
        let mut tape = Tape::new();
        let p = BoundParams::constants(&mut tape, &self.params);
        let pass = self.forward(&mut tape, &p, mixture, None)?;
        let est = tape.value(pass.estimates).to_f64_vec();
        est.chunks(pass.trimmed_len)
            .map(|s| Waveform::new(s.to_vec(), mixture.sample_rate()))
            .collect()
    }
}
