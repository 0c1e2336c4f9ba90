//! Architecture registry and the uniform model handle used by the trainer.

use std::cell::Cell;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{channel_moments, Layer, Mode, NetBuilder, Network, Trace};
use crate::tensor::Tensor;

/// One entry of a heterogeneous architecture stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub builder_id: String,
    pub width: usize,
    pub depth: usize,
    pub has_running_stats: bool,
    /// Expected input `[channels, height, width]`.
    pub input_shape: [usize; 3],
}

impl ArchitectureSpec {
    /// Looks up one of the shipped presets for the given input shape.
    pub fn preset(name: &str, input_shape: [usize; 3]) -> Result<Self> {
        let (builder, width, depth, bn) = match name {
            "linear_conv" => ("linear_conv", 4, 1, false),
            "small_cnn" => ("lenet", 6, 2, false),
            "mid_cnn" => ("bn_cnn", 16, 2, true),
            "wide_cnn" => ("bn_cnn", 32, 2, true),
            "residual_cnn" => ("resnet", 16, 2, true),
            other => {
                return Err(Error::config(
                    "schedule",
                    format!("unknown architecture preset `{other}`"),
                ))
            }
        };
        Ok(ArchitectureSpec {
            name: name.to_string(),
            builder_id: builder.to_string(),
            width,
            depth,
            has_running_stats: bn,
            input_shape,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["linear_conv", "small_cnn", "mid_cnn", "wide_cnn", "residual_cnn"]
    }
}

type BuildFn = fn(&ArchitectureSpec, usize, &mut ChaCha8Rng) -> Result<Network>;

/// Registered builders, keyed by `builder_id`.
pub fn registry() -> &'static [(&'static str, BuildFn)] {
    &[
        ("linear_conv", build_linear_conv),
        ("lenet", build_lenet),
        ("bn_cnn", build_bn_cnn),
        ("resnet", build_resnet),
    ]
}

fn lookup(builder_id: &str) -> Option<BuildFn> {
    registry()
        .iter()
        .find(|(id, _)| *id == builder_id)
        .map(|(_, f)| *f)
}

/// conv → global average pool → linear; no nonlinearity, no normalization.
fn build_linear_conv(spec: &ArchitectureSpec, out: usize, rng: &mut ChaCha8Rng) -> Result<Network> {
    let [c, _, _] = spec.input_shape;
    let mut b = NetBuilder::new(rng);
    let layers = vec![
        b.conv(c, spec.width, 3, true),
        Layer::GlobalAvgPool,
        b.linear(spec.width, out),
    ];
    b.finish(layers, spec.input_shape, out)
}

/// LeNet-style: `depth` × (conv, relu, pool), then a hidden dense layer.
fn build_lenet(spec: &ArchitectureSpec, out: usize, rng: &mut ChaCha8Rng) -> Result<Network> {
    let [c, h, w] = spec.input_shape;
    let mut b = NetBuilder::new(rng);
    let mut layers = Vec::new();
    let (mut ch, mut hh, mut ww) = (c, h, w);
    for d in 0..spec.depth {
        let next = spec.width << d;
        layers.push(b.conv(ch, next, 3, true));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        ch = next;
        hh /= 2;
        ww /= 2;
    }
    if hh == 0 || ww == 0 {
        return Err(Error::Shape("input too small for lenet depth".into()));
    }
    let hidden = 4 * spec.width;
    layers.push(Layer::Flatten);
    layers.push(b.linear(ch * hh * ww, hidden));
    layers.push(Layer::Relu);
    layers.push(b.linear(hidden, out));
    b.finish(layers, spec.input_shape, out)
}

/// Plain conv/BN/relu stages separated by pooling, global pool, linear head.
fn build_bn_cnn(spec: &ArchitectureSpec, out: usize, rng: &mut ChaCha8Rng) -> Result<Network> {
    let [c, _, _] = spec.input_shape;
    let mut b = NetBuilder::new(rng);
    let mut layers = Vec::new();
    let mut ch = c;
    for d in 0..spec.depth {
        let next = spec.width << d;
        layers.push(b.conv(ch, next, 3, false));
        layers.push(b.batch_norm(next));
        layers.push(Layer::Relu);
        if d + 1 < spec.depth {
            layers.push(Layer::MaxPool2);
        }
        ch = next;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(b.linear(ch, out));
    b.finish(layers, spec.input_shape, out)
}

/// Stem conv, then `depth` residual stages (widening with a 1×1 projection
/// shortcut after the first), pooled between stages.
fn build_resnet(spec: &ArchitectureSpec, out: usize, rng: &mut ChaCha8Rng) -> Result<Network> {
    let [c, _, _] = spec.input_shape;
    let mut b = NetBuilder::new(rng);
    let mut layers = vec![
        b.conv(c, spec.width, 3, false),
        b.batch_norm(spec.width),
        Layer::Relu,
    ];
    let mut ch = spec.width;
    for d in 0..spec.depth {
        let next = spec.width << d;
        if d > 0 {
            layers.push(Layer::MaxPool2);
        }
        let body = vec![
            b.conv(ch, next, 3, false),
            b.batch_norm(next),
            Layer::Relu,
            b.conv(next, next, 3, false),
            b.batch_norm(next),
        ];
        let shortcut = if next != ch {
            vec![b.conv(ch, next, 1, false), b.batch_norm(next)]
        } else {
            Vec::new()
        };
        layers.push(Layer::Residual { body, shortcut });
        ch = next;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(b.linear(ch, out));
    b.finish(layers, spec.input_shape, out)
}

thread_local! {
    static LIVE: Cell<(usize, usize)> = const { Cell::new((0, 0)) };
}

/// Live/peak counts of [`ModelHandle`]s on the current thread.
pub fn live_models() -> (usize, usize) {
    LIVE.with(|c| c.get())
}

/// Resets the peak counter to the current live count.
pub fn reset_peak_models() {
    LIVE.with(|c| {
        let (live, _) = c.get();
        c.set((live, live));
    });
}

struct LiveToken;

impl LiveToken {
    fn new() -> Self {
        LIVE.with(|c| {
            let (live, peak) = c.get();
            c.set((live + 1, peak.max(live + 1)));
        });
        LiveToken
    }
}

impl Drop for LiveToken {
    fn drop(&mut self) {
        LIVE.with(|c| {
            let (live, peak) = c.get();
            c.set((live.saturating_sub(1), peak));
        });
    }
}

/// Per-layer batch statistics of post-convolution feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub layer_ids: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    /// Variances, not standard deviations.
    pub variances: Vec<Vec<f64>>,
}

impl FeatureStats {
    /// Statistics of the recorded taps of a trace.
    pub fn from_trace(trace: &Trace) -> Result<Self> {
        let mut stats = FeatureStats {
            layer_ids: Vec::new(),
            means: Vec::new(),
            variances: Vec::new(),
        };
        for (id, tap) in trace.taps().iter().enumerate() {
            let t = tap
                .as_ref()
                .ok_or_else(|| Error::Internal(format!("tap {id} was not recorded")))?;
            let (n, c, h, w) = t.dims4()?;
            let (m, v) = channel_moments(t.data(), n, c, h * w);
            stats.layer_ids.push(id);
            stats.means.push(m);
            stats.variances.push(v);
        }
        Ok(stats)
    }
}

/// A model in the architecture stream: network plus train/eval mode.
pub struct ModelHandle {
    spec: ArchitectureSpec,
    net: Network,
    mode: Mode,
    _live: LiveToken,
}

impl Clone for ModelHandle {
    fn clone(&self) -> Self {
        ModelHandle {
            spec: self.spec.clone(),
            net: self.net.clone(),
            mode: self.mode,
            _live: LiveToken::new(),
        }
    }
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("spec", &self.spec)
            .field("mode", &self.mode)
            .field("params", &self.net.params().len())
            .finish()
    }
}

/// Builds a freshly initialized model. Deterministic in `seed`.
pub fn instantiate(spec: &ArchitectureSpec, output_dim: usize, seed: u64) -> Result<ModelHandle> {
    let build = lookup(&spec.builder_id).ok_or_else(|| {
        Error::config(
            "schedule",
            format!("no builder registered for `{}`", spec.builder_id),
        )
    })?;
    if output_dim < 2 {
        return Err(Error::config("output_dim", "must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build(spec, output_dim, &mut rng)?;
    if net.has_batch_norm() != spec.has_running_stats {
        return Err(Error::config(
            "schedule",
            format!(
                "`{}` declares has_running_stats = {} but its builder disagrees",
                spec.name, spec.has_running_stats
            ),
        ));
    }
    Ok(ModelHandle {
        spec: spec.clone(),
        net,
        mode: Mode::Train,
        _live: LiveToken::new(),
    })
}

impl ModelHandle {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.net.params().len()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn running_stats(&self) -> &[f64] {
        self.net.running()
    }

    /// Overwrites parameters and running statistics (e.g. restoring a snapshot).
    pub fn load_state(&mut self, params: &[f64], running: &[f64]) -> Result<()> {
        if params.len() != self.net.params().len() || running.len() != self.net.running().len() {
            return Err(Error::Shape("snapshot does not match model layout".into()));
        }
        self.net.params_mut().copy_from_slice(params);
        self.net.running_mut().copy_from_slice(running);
        Ok(())
    }

    pub fn zero_head(&mut self) {
        self.net.zero_head();
    }

    /// Forward pass honoring the current mode; train mode updates running stats.
    pub fn forward_logits(&mut self, inputs: &Tensor) -> Result<Tensor> {
        let (out, trace) = self.net.forward(inputs, self.mode)?;
        if self.mode == Mode::Train {
            self.net.commit_running_stats(&trace);
        }
        Ok(out)
    }

    /// Eval-mode forward that never touches state; safe from shared references.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(inputs, Mode::Eval)?.0)
    }

    /// Forward in the current mode, returning the trace for a later backward.
    /// Running stats are not updated until [`ModelHandle::commit`].
    pub fn forward_traced(&self, inputs: &Tensor) -> Result<(Tensor, Trace)> {
        self.net.forward(inputs, self.mode)
    }

    pub fn commit(&mut self, trace: &Trace) {
        if trace.mode() == Mode::Train {
            self.net.commit_running_stats(trace);
        }
    }

    pub fn backward(
        &self,
        trace: &Trace,
        grad_logits: Option<&Tensor>,
        tap_grads: &[Option<Tensor>],
        param_grads: Option<&mut [f64]>,
    ) -> Result<Tensor> {
        self.net.backward(trace, grad_logits, tap_grads, param_grads)
    }

    /// Batch-norm running mean/variance for every normalized conv output.
    pub fn collect_running_stats(&self) -> Result<FeatureStats> {
        if !self.spec.has_running_stats {
            return Err(Error::UnsupportedArchitecture(format!(
                "`{}` keeps no normalization running statistics",
                self.spec.name
            )));
        }
        let mut stats = FeatureStats {
            layer_ids: Vec::new(),
            means: Vec::new(),
            variances: Vec::new(),
        };
        let running = self.net.running();
        for (id, norm) in self.net.tap_norms().iter().enumerate() {
            if let Some((off, c)) = norm {
                stats.layer_ids.push(id);
                stats.means.push(running[*off..off + c].to_vec());
                stats.variances.push(running[off + c..off + 2 * c].to_vec());
            }
        }
        Ok(stats)
    }

    /// Batch moments of every post-convolution feature map for `batch`,
    /// from one eval-mode forward.
    pub fn approximate_feature_stats(&self, batch: &Tensor) -> Result<FeatureStats> {
        if self.net.num_taps() == 0 {
            return Err(Error::UnsupportedArchitecture(format!(
                "`{}` has no convolution layers",
                self.spec.name
            )));
        }
        let (_, trace) = self.net.forward(batch, Mode::Eval)?;
        FeatureStats::from_trace(&trace)
    }

    /// Stable digest of parameters and running statistics.
    pub fn state_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.net.params().iter().chain(self.net.running()) {
            h.update(v.to_bits().to_le_bytes());
        }
        crate::util::hex(&h.finalize())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            output_dim: self.output_dim(),
            num_params: self.net.params().len(),
            num_running: self.net.running().len(),
        };
        let head = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + head.len() + 8 * (header.num_params + header.num_running));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
        buf.extend_from_slice(&head);
        for v in self.net.params().iter().chain(self.net.running()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        crate::util::write_atomic(path, &buf)
    }

    pub fn load_checkpoint(path: &Path) -> Result<ModelHandle> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let head = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(head).map_err(|e| Error::format(path, e))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let body = &bytes[16 + hlen..];
        if body.len() != 8 * (header.num_params + header.num_running) {
            return Err(bad("payload length mismatch"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut model = instantiate(&header.spec, header.output_dim, 0)?;
        let (p, r) = values.split_at(header.num_params);
        model.load_state(p, r)?;
        model.set_mode(Mode::Eval);
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HCLCKPT\0";
const CHECKPOINT_FORMAT: &str = "hcl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    spec: ArchitectureSpec,
    output_dim: usize,
    num_params: usize,
    num_running: usize,
}
