"""Desk-scale flow-matching harness for exercising the attention kernels.

A small pre-norm transformer predicts the straight-path velocity field
on token grids a few pixels wide. It exists to generate real attention
maps, real schedules, and real MAC counts in seconds on a laptop; it is
not trying to be a competitive image model. Layers can mix vanilla and
mediated attention freely, and the mediator count is a runtime argument
so one set of weights serves every schedule level.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .attention import (
    AttentionConfig,
    FlopsReport,
    MediatorConfig,
    MultiHeadParams,
    attention_flops,
    composed_attention_map,
    mediator_attention,
    mediator_flops,
    multi_head_attention,
)
from .errors import ConfigError, DimensionError, DomainError, NumericError, UsageError
from .redundancy import trace_over_steps
from .scheduler import run_scheduled_sampling
from .tensor import (
    Tensor,
    add,
    backward,
    embedding_row,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mul,
    no_grad,
    reshape,
    sub,
)
from .util import stream_rng

LAYER_KINDS = ("vanilla", "mediator")


def interpolate(x, eps, t):
    """Straight-line bridge between data and noise.

    Returns (x_t, velocity target) for x_t = (1 - t) x + t eps; the
    velocity of that path is eps - x everywhere on it.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise DimensionError(f"data and noise shapes differ: {x.shape} vs {eps.shape}")
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"interpolation time {t} outside [0, 1]")
    return (1.0 - t) * x + t * eps, eps - x


def time_features(t, width):
    """Sinusoidal features of a scalar time in [0, 1]."""
    if width < 2 or width % 2:
        raise ConfigError(f"time feature width must be even and >= 2, got {width}")
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = 1000.0 * float(t) * freqs
    return np.concatenate([np.cos(angles), np.sin(angles)])


@dataclass(frozen=True)
class ToyModelConfig:
    """Shape of the toy velocity model."""

    grid_h: int = 8
    grid_w: int = 8
    channels: int = 1
    hidden: int = 16
    heads: int = 2
    layer_kinds: tuple = ("vanilla", "mediator")
    time_width: int = 8
    classes: int = 4
    default_mediators: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "layer_kinds", tuple(self.layer_kinds))
        for kind in self.layer_kinds:
            if kind not in LAYER_KINDS:
                raise ConfigError(f"layer kind {kind!r} not in {LAYER_KINDS}")
        if not self.layer_kinds:
            raise ConfigError("model needs at least one layer")
        if self.classes < 1 or self.channels < 1 or self.mlp_ratio < 1:
            raise ConfigError(f"invalid model config: {self}")
        # AttentionConfig validates the rest (grid, heads, hidden).
        self.attention_config  # noqa: B018

    @property
    def n_tokens(self):
        return self.grid_h * self.grid_w

    @property
    def attention_config(self):
        return AttentionConfig(self.n_tokens, self.hidden, self.heads, self.grid_h, self.grid_w)

    def to_json_dict(self):
        return {
            "grid": [self.grid_h, self.grid_w],
            "channels": self.channels,
            "hidden": self.hidden,
            "heads": self.heads,
            "layer_kinds": list(self.layer_kinds),
            "time_width": self.time_width,
            "classes": self.classes,
            "default_mediators": self.default_mediators,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_json_dict(cls, payload):
        try:
            grid = payload.get("grid", [8, 8])
            return cls(
                grid_h=int(grid[0]),
                grid_w=int(grid[1]),
                channels=int(payload.get("channels", 1)),
                hidden=int(payload.get("hidden", 16)),
                heads=int(payload.get("heads", 2)),
                layer_kinds=tuple(payload.get("layer_kinds", ("vanilla", "mediator"))),
                time_width=int(payload.get("time_width", 8)),
                classes=int(payload.get("classes", 4)),
                default_mediators=int(payload.get("default_mediators", 4)),
                mlp_ratio=int(payload.get("mlp_ratio", 4)),
            )
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"malformed model config: {exc}") from exc


def tokens_from_image(image, cfg):
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape == (cfg.n_tokens, cfg.channels):
        return arr
    if arr.shape == (cfg.grid_h, cfg.grid_w, cfg.channels):
        return arr.reshape(cfg.n_tokens, cfg.channels)
    raise DimensionError(
        f"expected image ({cfg.grid_h}, {cfg.grid_w}, {cfg.channels}) or tokens "
        f"({cfg.n_tokens}, {cfg.channels}), got {arr.shape}"
    )


def image_from_tokens(tokens, cfg):
    arr = np.asarray(tokens, dtype=np.float64)
    return arr.reshape(cfg.grid_h, cfg.grid_w, cfg.channels)


class ToyDiffusionModel:
    """Pre-norm transformer over raster tokens predicting velocities.

    Conditioning is additive: a projected sinusoidal time row and a
    learned class row are added to every token after the input lift.
    The output head starts at zero so an untrained model predicts the
    zero field.
    """

    def __init__(self, cfg, params=None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params(seed)
        self._validate_params()

    def _init_params(self, seed):
        cfg = self.cfg
        rng = stream_rng(seed, "init")
        hid = cfg.hidden
        mlp = cfg.mlp_ratio * hid

        def normal(rows, cols, fan):
            return Tensor(rng.normal(0.0, fan**-0.5, (rows, cols)), requires_grad=True)

        params = {
            "in_proj.w": normal(cfg.channels, hid, cfg.channels),
            "in_proj.b": Tensor(np.zeros(hid), requires_grad=True),
            "time_proj.w": normal(cfg.time_width, hid, cfg.time_width),
            "time_proj.b": Tensor(np.zeros(hid), requires_grad=True),
            "class_embed": Tensor(
                rng.normal(0.0, 0.5, (cfg.classes, hid)), requires_grad=True
            ),
            "head.w": Tensor(np.zeros((hid, cfg.channels)), requires_grad=True),
            "head.b": Tensor(np.zeros(cfg.channels), requires_grad=True),
        }
        for i, kind in enumerate(cfg.layer_kinds):
            prefix = f"layer{i}"
            params[f"{prefix}.norm1.gain"] = Tensor(np.ones(hid), requires_grad=True)
            params[f"{prefix}.norm1.bias"] = Tensor(np.zeros(hid), requires_grad=True)
            params[f"{prefix}.attn.w_query"] = normal(hid, hid, hid)
            params[f"{prefix}.attn.w_key"] = normal(hid, hid, hid)
            params[f"{prefix}.attn.w_value"] = normal(hid, hid, hid)
            params[f"{prefix}.attn.w_out"] = normal(hid, hid, hid)
            if kind == "mediator":
                params[f"{prefix}.attn.dw"] = Tensor(np.zeros((3, 3, hid)), requires_grad=True)
            params[f"{prefix}.norm2.gain"] = Tensor(np.ones(hid), requires_grad=True)
            params[f"{prefix}.norm2.bias"] = Tensor(np.zeros(hid), requires_grad=True)
            params[f"{prefix}.mlp.w1"] = normal(hid, mlp, hid)
            params[f"{prefix}.mlp.b1"] = Tensor(np.zeros(mlp), requires_grad=True)
            params[f"{prefix}.mlp.w2"] = normal(mlp, hid, mlp)
            params[f"{prefix}.mlp.b2"] = Tensor(np.zeros(hid), requires_grad=True)
        return params

    def _expected_param_shapes(self):
        cfg = self.cfg
        hid, mlp = cfg.hidden, cfg.mlp_ratio * cfg.hidden
        shapes = {
            "in_proj.w": (cfg.channels, hid),
            "in_proj.b": (hid,),
            "time_proj.w": (cfg.time_width, hid),
            "time_proj.b": (hid,),
            "class_embed": (cfg.classes, hid),
            "head.w": (hid, cfg.channels),
            "head.b": (cfg.channels,),
        }
        for i, kind in enumerate(cfg.layer_kinds):
            prefix = f"layer{i}"
            shapes[f"{prefix}.norm1.gain"] = (hid,)
            shapes[f"{prefix}.norm1.bias"] = (hid,)
            shapes[f"{prefix}.attn.w_query"] = (hid, hid)
            shapes[f"{prefix}.attn.w_key"] = (hid, hid)
            shapes[f"{prefix}.attn.w_value"] = (hid, hid)
            shapes[f"{prefix}.attn.w_out"] = (hid, hid)
            if kind == "mediator":
                shapes[f"{prefix}.attn.dw"] = (3, 3, hid)
            shapes[f"{prefix}.norm2.gain"] = (hid,)
            shapes[f"{prefix}.norm2.bias"] = (hid,)
            shapes[f"{prefix}.mlp.w1"] = (hid, mlp)
            shapes[f"{prefix}.mlp.b1"] = (mlp,)
            shapes[f"{prefix}.mlp.w2"] = (mlp, hid)
            shapes[f"{prefix}.mlp.b2"] = (hid,)
        return shapes

    def _validate_params(self):
        expected = self._expected_param_shapes()
        got = set(self.params)
        if got != set(expected):
            missing = sorted(set(expected) - got)
            stray = sorted(got - set(expected))
            raise ConfigError(f"parameter names mismatch: missing {missing}, stray {stray}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}"
                )

    def _layer_params(self, index):
        prefix = f"layer{index}"
        return MultiHeadParams(
            w_query=self.params[f"{prefix}.attn.w_query"],
            w_key=self.params[f"{prefix}.attn.w_key"],
            w_value=self.params[f"{prefix}.attn.w_value"],
            w_out=self.params[f"{prefix}.attn.w_out"],
        )

    def forward(self, x, t, label, mediator_count=None, counter=None, capture=False):
        """Predict the velocity field for tokens ``x`` at time ``t``.

        Returns (velocity tensor, captured per-layer maps or None). Only
        attention work is metered by ``counter``; the lift, conditioning,
        and MLPs are off the books by design.
        """
        cfg = self.cfg
        t = float(t)
        if not (0.0 <= t <= 1.0):
            raise DomainError(f"time {t} outside [0, 1]")
        label = int(label)
        if not (0 <= label < cfg.classes):
            raise DomainError(f"label {label} outside [0, {cfg.classes})")
        count = cfg.default_mediators if mediator_count is None else int(mediator_count)
        attn_cfg = cfg.attention_config
        tokens = Tensor(tokens_from_image(x, cfg)) if not isinstance(x, Tensor) else x

        z = add(matmul(tokens, self.params["in_proj.w"]), self.params["in_proj.b"])
        t_row = matmul(Tensor(time_features(t, cfg.time_width)[None, :]), self.params["time_proj.w"])
        t_row = add(reshape(t_row, (cfg.hidden,)), self.params["time_proj.b"])
        z = add(z, t_row)
        z = add(z, embedding_row(self.params["class_embed"], label))

        captured = [] if capture else None
        for i, kind in enumerate(cfg.layer_kinds):
            prefix = f"layer{i}"
            normed = layer_norm(
                z, self.params[f"{prefix}.norm1.gain"], self.params[f"{prefix}.norm1.bias"]
            )
            if kind == "vanilla":
                attn_out, maps = multi_head_attention(
                    normed, self._layer_params(i), attn_cfg, counter
                )
            else:
                mcfg = MediatorConfig.from_count(count, attn_cfg)
                attn_out, maps = mediator_attention(
                    normed,
                    self._layer_params(i),
                    attn_cfg,
                    mcfg,
                    dw_kernels=self.params[f"{prefix}.attn.dw"],
                    counter=counter,
                )
            z = add(z, attn_out)
            if capture:
                captured.append(maps)
            normed = layer_norm(
                z, self.params[f"{prefix}.norm2.gain"], self.params[f"{prefix}.norm2.bias"]
            )
            hidden = gelu(add(matmul(normed, self.params[f"{prefix}.mlp.w1"]), self.params[f"{prefix}.mlp.b1"]))
            mlp_out = add(matmul(hidden, self.params[f"{prefix}.mlp.w2"]), self.params[f"{prefix}.mlp.b2"])
            z = add(z, mlp_out)

        velocity = add(matmul(z, self.params["head.w"]), self.params["head.b"])
        return velocity, captured

    def step_flops(self, mediator_count=None):
        """Analytic attention MACs for one forward pass (all layers)."""
        cfg = self.cfg
        count = cfg.default_mediators if mediator_count is None else int(mediator_count)
        attn_cfg = cfg.attention_config
        total = FlopsReport()
        for kind in cfg.layer_kinds:
            if kind == "vanilla":
                total = total + attention_flops(attn_cfg)
            else:
                total = total + mediator_flops(attn_cfg, count)
        return total

    def state_dict(self):
        return dict(self.params)

    @classmethod
    def from_state(cls, cfg, tensors):
        params = {name: Tensor(t.data, requires_grad=True) for name, t in tensors.items()}
        return cls(cfg, params=params)


# ---------------------------------------------------------------------------
# training


@dataclass
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9


class SgdState:
    """Plain SGD with classical momentum over a named parameter dict."""

    def __init__(self, config):
        self.config = config
        self.velocity = {}

    def apply(self, params, grads):
        updated = {}
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros(param.shape)
            buf = self.velocity.get(name)
            buf = grad if buf is None else self.config.momentum * buf + grad
            self.velocity[name] = buf
            updated[name] = Tensor(param.data - self.config.lr * buf, requires_grad=True)
        return updated


def batch_loss(model, images, labels, times, noises, mediator_count=None):
    """Mean squared velocity error over a batch, as one graph."""
    if len(images) == 0:
        raise UsageError("batch_loss needs at least one sample")
    total = None
    for image, label, t, eps in zip(images, labels, times, noises):
        x_t, v_target = interpolate(image, eps, t)
        pred, _ = model.forward(
            tokens_from_image(x_t, model.cfg), float(t), int(label), mediator_count
        )
        diff = sub(pred, Tensor(tokens_from_image(v_target, model.cfg)))
        err = mean_all(mul(diff, diff))
        total = err if total is None else add(total, err)
    return total * (1.0 / len(images))


def train_step(model, optimizer, images, labels, rng, mediator_count=None):
    """One SGD step on a batch; returns (updated model, loss value).

    Times and noises are drawn from ``rng``; parameters are rebound to
    fresh tensors rather than mutated, so old graphs stay valid.
    """
    times = rng.uniform(0.0, 1.0, len(images))
    noises = [rng.standard_normal(np.shape(img)) for img in images]
    for param in model.params.values():
        param.grad = None
    loss = batch_loss(model, images, labels, times, noises, mediator_count)
    backward(loss)
    grads = {name: param.grad for name, param in model.params.items()}
    new_params = optimizer.apply(model.params, grads)
    return ToyDiffusionModel(model.cfg, params=new_params), loss.item()


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthData:
    images: np.ndarray
    labels: np.ndarray


def synth_dataset(seed, classes, grid_h, grid_w, size, channels=1):
    """Class-conditional gratings and blobs, standardised to zero mean
    and unit variance over the whole set.

    Even classes are oriented gratings, odd classes off-centre blobs;
    per-sample phase or position jitter plus mild pixel noise keeps the
    classes from being singletons.
    """
    if classes < 1 or size < 1:
        raise ConfigError(f"need positive classes and size, got {classes}, {size}")
    rng = stream_rng(seed, "data")
    labels = np.arange(size) % classes
    rng.shuffle(labels)
    ys, xs = np.meshgrid(
        np.linspace(-1.0, 1.0, grid_h), np.linspace(-1.0, 1.0, grid_w), indexing="ij"
    )
    images = np.empty((size, grid_h, grid_w, channels))
    for i in range(size):
        c = int(labels[i])
        for ch in range(channels):
            angle = math.pi * (c + ch) / max(classes, 2)
            if c % 2 == 0:
                freq = 1.0 + 0.5 * (c % 6)
                phase = rng.uniform(-0.4, 0.4)
                pattern = np.cos(
                    math.pi * freq * (math.cos(angle) * xs + math.sin(angle) * ys) + phase
                )
            else:
                cx = 0.5 * math.cos(2.0 * math.pi * c / classes) + rng.normal(0.0, 0.08)
                cy = 0.5 * math.sin(2.0 * math.pi * c / classes) + rng.normal(0.0, 0.08)
                pattern = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * 0.35**2)))
            images[i, :, :, ch] = pattern + rng.normal(0.0, 0.05, (grid_h, grid_w))
    images -= images.mean()
    images /= images.std()
    return SynthData(images=images, labels=labels.astype(np.int64))


# ---------------------------------------------------------------------------
# sampling bundles


class ModelBundle:
    """Adapter exposing a trained model to the sampling loop.

    Default mode runs one weight set for every mediator count, since
    pooling has no parameters. ``models_by_count`` switches to separate
    per-count weights instead: when the scheduler selects a count with
    an entry there, that model serves the step; counts without an entry
    fall back to the shared model. All models must share a config.
    """

    def __init__(self, model, label, capture=False, default_count=None, models_by_count=None):
        self.model = model
        self.label = int(label)
        self.capture = capture
        self.step_maps = []
        self.models_by_count = dict(models_by_count or {})
        for other in self.models_by_count.values():
            if other.cfg != model.cfg:
                raise ConfigError("per-count models must share the base model's config")
        self.default_count = (
            model.cfg.default_mediators if default_count is None else int(default_count)
        )

    def _model_for(self, count):
        return self.models_by_count.get(count, self.model)

    def velocity(self, x, t, count):
        model = self._model_for(count)
        with no_grad():
            out, maps = model.forward(x, t, self.label, mediator_count=count, capture=self.capture)
        if self.capture:
            self.step_maps.append(maps)
        return out.data

    def step_flops(self, count):
        return self._model_for(count).step_flops(count)


class ScriptedBundle:
    """Bundle whose per-step displacement follows a given script.

    The velocity is a constant field sized so step k moves the latent by
    exactly ``deltas[k]`` under both distance metrics. Useful for
    exercising schedules without a trained model.
    """

    def __init__(self, deltas, attn_cfg, steps, default_count=1):
        self.deltas = [float(d) for d in deltas]
        self.attn_cfg = attn_cfg
        self.steps = int(steps)
        self.default_count = int(default_count)
        self._step = 0

    def velocity(self, x, t, count):
        if self._step >= len(self.deltas):
            raise UsageError(f"scripted bundle ran out of deltas at step {self._step}")
        magnitude = self.deltas[self._step] * self.steps
        self._step += 1
        return np.full_like(x, magnitude)

    def step_flops(self, count):
        return mediator_flops(self.attn_cfg, count)


@dataclass
class SampleResult:
    image: np.ndarray
    trace: object
    flops: FlopsReport
    trajectory: list = field(default_factory=list)


def euler_sample(
    model,
    label,
    steps,
    seed,
    schedule=None,
    mediator_count=None,
    record_trajectory=False,
    sample_index=0,
    models_by_count=None,
):
    """Draw one sample by deterministic Euler integration from noise.

    ``mediator_count`` overrides the model default when no schedule is
    given; ``sample_index`` separates the noise streams of samples drawn
    under one seed; ``models_by_count`` swaps in per-count weight sets
    as the schedule advances. Returns a SampleResult with the final
    image on the spatial grid; the trajectory, when recorded, stores
    each intermediate token matrix including the initial noise.
    """
    cfg = model.cfg
    rng = stream_rng(seed, "sampling", int(sample_index))
    x_init = rng.standard_normal((cfg.n_tokens, cfg.channels))
    bundle = ModelBundle(
        model, label, default_count=mediator_count, models_by_count=models_by_count
    )
    trajectory = [x_init.copy()] if record_trajectory else []

    def on_step(step, x):
        if record_trajectory:
            trajectory.append(x.copy())

    final, trace, flops = run_scheduled_sampling(bundle, x_init, steps, schedule, on_step)
    return SampleResult(
        image=image_from_tokens(final, cfg), trace=trace, flops=flops, trajectory=trajectory
    )


def capture_redundancy(model, labels, steps, seed, schedule=None, pair_cap=None, model_id=""):
    """Sample once per label while recording attention maps, then score
    them. Mediated layers are composed to full maps before scoring.

    Returns a RedundancyTrace with scores averaged over the samples.
    """
    captured = []
    for s, label in enumerate(labels):
        cfg = model.cfg
        rng = stream_rng(seed, "sampling", s)
        x_init = rng.standard_normal((cfg.n_tokens, cfg.channels))
        bundle = ModelBundle(model, label, capture=True)
        run_scheduled_sampling(bundle, x_init, steps, schedule)
        sample_steps = []
        for step_maps in bundle.step_maps:
            layers = [
                composed_attention_map(maps) if maps.kind == "mediated" else maps
                for maps in step_maps
            ]
            sample_steps.append(layers)
        captured.append(sample_steps)
    return trace_over_steps(captured, model_id=model_id, pair_cap=pair_cap, seed=seed)


# ---------------------------------------------------------------------------
# sample-quality proxy


def fid_proxy(generated, reference, seed=0, max_dims=64):
    """Fréchet distance between Gaussian fits of two sample sets.

    Samples are flattened; sets wider than ``max_dims`` are first passed
    through a shared seeded orthonormal projection. Covariances use the
    population convention and get a 1e-6 diagonal ridge, so tiny or
    degenerate sets stay well defined. Identical sets score zero up to
    floating-point noise.
    """
    gen = np.asarray(generated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if gen.ndim < 2 or ref.ndim < 2:
        raise DimensionError("sample sets must be arrays of at least one sample each")
    if gen.shape[0] == 0 or ref.shape[0] == 0:
        raise DimensionError("sample sets must be non-empty")
    gen = gen.reshape(gen.shape[0], -1)
    ref = ref.reshape(ref.shape[0], -1)
    if gen.shape[1] != ref.shape[1]:
        raise DimensionError(
            f"sample dimensions differ: {gen.shape[1]} vs {ref.shape[1]}"
        )
    if not (np.all(np.isfinite(gen)) and np.all(np.isfinite(ref))):
        raise NumericError("sample sets contain non-finite values")
    dims = gen.shape[1]
    if dims > max_dims:
        rng = stream_rng(seed, "fid-projection")
        raw = rng.standard_normal((dims, max_dims))
        basis, _ = np.linalg.qr(raw)
        gen = gen @ basis
        ref = ref @ basis

    def fit(block):
        mean = block.mean(axis=0)
        centred = block - mean
        cov = centred.T @ centred / block.shape[0]
        return mean, cov + 1e-6 * np.eye(block.shape[1])

    mu_g, cov_g = fit(gen)
    mu_r, cov_r = fit(ref)
    covmean = scipy.linalg.sqrtm(cov_g @ cov_r)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    mean_term = float(np.sum((mu_g - mu_r) ** 2))
    trace_term = float(np.trace(cov_g) + np.trace(cov_r) - 2.0 * np.trace(covmean))
    return mean_term + trace_term
