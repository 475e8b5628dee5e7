"""Single- and multi-task TabPerceiver, the MLP baseline, and the training loop."""
import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Decoder, LatentConfig, MLPHead, PerceiverEncoder, concat_latents
from .encoding import DEFAULT_BINS, BinSpec, CategoricalEmbedding, ContinuousEmbedding, FeatureSchema, fit_bins
from .errors import SchemaError, TrainingError, UsageError, ValidationError
from .layers import Linear, Module
from .metrics import macro_auc
from .seeding import derive_rng

ARCHITECTURES = ("tabperceiver", "mlp")
HEAD_TYPES = ("decoder", "mlp")


@dataclass
class ModelConfig:
    """Architecture and optimisation knobs. Defaults follow the published
    hyper-parameter table; learning rate, epochs and patience are ours."""

    architecture: str = "tabperceiver"
    embed_dim: int = 128
    latent: LatentConfig = field(default_factory=LatentConfig)
    head_type: str = "decoder"
    head_hidden: tuple = (128, 64)
    tasks: tuple = (("risk", 3), ("downstream", 2))
    n_bins: int = DEFAULT_BINS
    dropout: float = 0.0
    label_smoothing: float = 0.3
    weight_decay: float = 0.01
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 50
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.latent, dict):
            self.latent = LatentConfig(**self.latent)
        self.tasks = tuple((str(n), int(k)) for n, k in self.tasks)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        self.validate()

    def validate(self):
        if not self.tasks:
            raise ValidationError("at least one task is required")
        if len({n for n, _ in self.tasks}) != len(self.tasks):
            raise ValidationError("task names must be unique")
        if any(k < 2 for _, k in self.tasks):
            raise ValidationError("every task needs at least two classes")
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"architecture must be one of {ARCHITECTURES}")
        if self.head_type not in HEAD_TYPES:
            raise ValidationError(f"head_type must be one of {HEAD_TYPES}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or self.n_bins < 1:
            raise ValidationError("batch_size, epochs, patience and n_bins must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate must be > 0 and weight_decay >= 0")
        if self.architecture == "tabperceiver":
            self.latent.validate(self.embed_dim)

    @property
    def task_names(self):
        return [n for n, _ in self.tasks]

    @property
    def primary_task(self):
        return self.tasks[0][0]

    def to_dict(self):
        d = asdict(self)
        d["tasks"] = [list(t) for t in self.tasks]
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Inputs:
    """Model-ready arrays: categorical codes (B, M), continuous values (B, C),
    and integer targets per task."""

    codes: np.ndarray
    values: np.ndarray
    targets: dict

    def __len__(self):
        return self.codes.shape[0]

    def take(self, idx):
        return Inputs(self.codes[idx], self.values[idx], {k: v[idx] for k, v in self.targets.items()})


def table_inputs(table):
    """Arrays from a fully observed (imputed) cohort table."""
    return Inputs(table.categorical_codes(), table.continuous_values(), dict(table.targets))


# -- losses ------------------------------------------------------------------

def loss_single(logits, target, smoothing):
    return ad.cross_entropy(logits, target, smoothing)


def loss_multitask(losses, log_vars):
    """sum_i exp(-s_i) L_i + s_i with learnable log-variances ``s``."""
    if log_vars.shape != (len(losses),):
        raise ValidationError(f"need one log-variance per task, got {log_vars.shape} for {len(losses)}")
    total = None
    for i, loss in enumerate(losses):
        s = ad.getitem(log_vars, i)
        term = ad.add(ad.mul(ad.exp(ad.mul(s, -1.0)), loss), s)
        total = term if total is None else ad.add(total, term)
    return total


# -- models ------------------------------------------------------------------

class _TaskModel(Module):
    """Shared plumbing: per-task log-variances and the objective."""

    def _init_weights(self):
        n = len(self.cfg.tasks)
        self.log_vars = Tensor(np.zeros(n), requires_grad=True) if n > 1 else None

    def check_inputs(self, codes, values):
        codes = np.asarray(codes)
        values = np.asarray(values, dtype=np.float64)
        m, c = self.schema.n_categorical, self.schema.n_continuous
        if codes.ndim != 2 or codes.shape[1] != m or values.ndim != 2 or values.shape[1] != c:
            raise SchemaError(f"expected {m} categorical and {c} continuous columns, "
                              f"got codes {codes.shape} and values {values.shape}")
        if codes.shape[0] != values.shape[0]:
            raise SchemaError("codes and values have different row counts")
        return codes.astype(np.int64), values

    def objective(self, logits, targets):
        losses = [loss_single(logits[name], targets[name], self.cfg.label_smoothing)
                  for name in self.cfg.task_names]
        if self.log_vars is None:
            return losses[0], losses
        return loss_multitask(losses, self.log_vars), losses

    def meta(self):
        """JSON-ready state besides the trainable parameters."""
        return {"schema": self.schema.to_dict()}


class TabPerceiver(_TaskModel):
    """Categorical and continuous embeddings, each refined by its own latent
    encoder; the flattened latents feed one head per task."""

    def __init__(self, schema, bin_specs, cfg, rng):
        self.cfg = cfg
        self.schema = schema
        self.boundaries = [np.asarray(s.boundaries, dtype=np.float64) for s in bin_specs]
        if len(self.boundaries) != schema.n_continuous:
            raise SchemaError(f"{len(self.boundaries)} bin specs for {schema.n_continuous} continuous features")
        lat = cfg.latent
        d = cfg.embed_dim
        self.cat_embed = (CategoricalEmbedding([schema.categorical[n] for n in schema.categorical], d, rng)
                          if schema.n_categorical else None)
        self.num_embed = ContinuousEmbedding(bin_specs, d, rng) if schema.n_continuous else None
        self.cat_encoder = PerceiverEncoder(d, lat, rng, cfg.dropout) if schema.n_categorical else None
        self.num_encoder = PerceiverEncoder(d, lat, rng, cfg.dropout) if schema.n_continuous else None
        width = 2 * lat.num_latents * lat.latent_channels
        if cfg.head_type == "decoder":
            self.heads = {n: Decoder(lat.latent_channels, lat.heads_cross, k, rng) for n, k in cfg.tasks}
        else:
            self.heads = {n: MLPHead(width, cfg.head_hidden, k, rng) for n, k in cfg.tasks}
        self._init_weights()

    def latent_vector(self, codes, values, rng=None):
        b = codes.shape[0]
        lat = self.cfg.latent
        cat = self.cat_encoder(self.cat_embed(codes), rng) if self.cat_encoder else None
        num = self.num_encoder(self.num_embed(values), rng) if self.num_encoder else None
        return concat_latents(cat, num, lat.num_latents, lat.latent_channels, b)

    def forward(self, codes, values, rng=None):
        """Logits per task; ``rng`` enables dropout."""
        codes, values = self.check_inputs(codes, values)
        z = self.latent_vector(codes, values, rng)
        out = {}
        for name in self.cfg.task_names:
            head = self.heads[name]
            out[name] = head(z) if self.cfg.head_type == "decoder" else head(z, rng, self.cfg.dropout)
        return out

    def meta(self):
        return {"schema": self.schema.to_dict(), "boundaries": [b.tolist() for b in self.boundaries]}

    @classmethod
    def from_meta(cls, cfg, meta):
        schema = FeatureSchema.from_dict(meta["schema"])
        specs = [BinSpec(np.asarray(b)) for b in meta["boundaries"]]
        return cls(schema, specs, cfg, derive_rng(cfg.seed, "init"))


class MLPBaseline(_TaskModel):
    """GELU feed-forward trunk over one-hot categorical and standardised
    continuous inputs, with a linear head per task."""

    def __init__(self, schema, mean, std, cfg, rng):
        self.cfg = cfg
        self.schema = schema
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.cards = [schema.categorical[n] for n in schema.categorical]
        n_in = sum(self.cards) + schema.n_continuous
        sizes = [n_in, *cfg.head_hidden]
        self.trunk = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.heads = {n: Linear(sizes[-1], k, rng) for n, k in cfg.tasks}
        self._init_weights()

    def features(self, codes, values):
        """One-hot codes (unknown -> all zeros) next to standardised values."""
        b = codes.shape[0]
        blocks = []
        for j, card in enumerate(self.cards):
            onehot = np.zeros((b, card))
            ok = (codes[:, j] >= 0) & (codes[:, j] < card)
            onehot[np.flatnonzero(ok), codes[ok, j]] = 1.0
            blocks.append(onehot)
        blocks.append((values - self.mean) / self.std)
        return np.concatenate(blocks, axis=1)

    def forward(self, codes, values, rng=None):
        codes, values = self.check_inputs(codes, values)
        h = Tensor(self.features(codes, values))
        for layer in self.trunk:
            h = ad.gelu(layer(h))
            if rng is not None:
                h = ad.dropout(h, self.cfg.dropout, rng)
        return {name: self.heads[name](h) for name in self.cfg.task_names}

    def meta(self):
        return {"schema": self.schema.to_dict(), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_meta(cls, cfg, meta):
        schema = FeatureSchema.from_dict(meta["schema"])
        return cls(schema, meta["mean"], meta["std"], cfg, derive_rng(cfg.seed, "init"))


def build_model(cfg, schema, train):
    """Fresh model whose data-dependent pieces (bins, scaling) come from the
    continuous block of ``train`` (an :class:`Inputs`)."""
    rng = derive_rng(cfg.seed, "init")
    values = np.asarray(train.values, dtype=np.float64)
    if cfg.architecture == "mlp":
        mean = values.mean(axis=0) if len(train) else np.zeros(values.shape[1])
        std = values.std(axis=0) if len(train) else np.ones(values.shape[1])
        std = np.where(std > 0, std, 1.0)
        return MLPBaseline(schema, mean, std, cfg, rng)
    specs = [fit_bins(values[:, j], cfg.n_bins) for j in range(values.shape[1])]
    return TabPerceiver(schema, specs, cfg, rng)


def model_from_meta(cfg, meta):
    kind = TabPerceiver if cfg.architecture == "tabperceiver" else MLPBaseline
    return kind.from_meta(cfg, meta)


# -- prediction ----------------------------------------------------------------

def softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_logits(model, codes, values, chunk=256):
    out = {n: [] for n in model.cfg.task_names}
    with ad.no_grad():
        for start in range(0, max(len(codes), 1), chunk):
            logits = model.forward(codes[start:start + chunk], values[start:start + chunk])
            for n, t in logits.items():
                out[n].append(t.data)
    return {n: np.concatenate(v, axis=0) for n, v in out.items()}


def predict_proba(model, codes, values):
    """Class probabilities per task; assigned class is the row argmax."""
    return {n: softmax_rows(z) for n, z in predict_logits(model, codes, values).items()}


def round_to_float32(model):
    """Round every parameter to the nearest float32 (the checkpoint precision)."""
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


# -- training ------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies to matrices only; biases, norms and log-variances are not
    decayed.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if p.ndim >= 2 and self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)


@dataclass
class TrainState:
    epoch: int = 0
    best_epoch: int = -1
    best_score: float = -np.inf
    history: list = field(default_factory=list)
    optimizer: AdamW = None


def validation_score(model, data):
    """Macro one-vs-rest AUC of the primary task."""
    name, k = model.cfg.tasks[0]
    probs = predict_proba(model, data.codes, data.values)[name]
    return macro_auc(probs, data.targets[name], k)


def train_step(model, opt, batch, rng=None):
    opt.zero_grad()
    logits = model.forward(batch.codes, batch.values, rng)
    total, _ = model.objective(logits, batch.targets)
    ad.backward(total)
    opt.step()
    return total.item()


def fit(model, train, validation, epochs=None, log=None):
    """Mini-batch AdamW with early stopping on validation primary-task AUC.

    Parameters of the best validation epoch are restored at the end.
    ``log`` is called with each epoch's history record.
    """
    cfg = model.cfg
    if len(train) == 0 or len(validation) == 0:
        raise UsageError("fit needs non-empty training and validation splits")
    epochs = cfg.epochs if epochs is None else epochs
    shuffle = derive_rng(cfg.seed, "batching")
    drop_rng = derive_rng(cfg.seed, "dropout") if cfg.dropout > 0 else None
    opt = AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    state = TrainState(optimizer=opt)
    best = None
    stale = 0
    for epoch in range(epochs):
        order = shuffle.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            loss = train_step(model, opt, train.take(order[start:start + cfg.batch_size]), drop_rng)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}")
            losses.append(loss)
        score = validation_score(model, validation)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": score}
        state.history.append(record)
        state.epoch = epoch + 1
        if log is not None:
            log(record)
        if score > state.best_score:
            state.best_score, state.best_epoch = score, epoch
            best = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best)
    return state
