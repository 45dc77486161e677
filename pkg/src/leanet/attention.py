"""Layer-wise external attention.

An attention network (CAAN) reads the anomaly map; the channel-averaged,
sigmoid-squashed features at one of its tagged points form a single-channel
map ``M`` in (0, 1). The detection network (ADN) has its features at the
matching point rescaled by ``1 + M``. Both branches are trained jointly on
the sum of their binary cross-entropies.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ModelError, ShapeError
from .netspec import NetworkSpec, check_downsampling, validate_attention_alignment
from .network import Network
from .optim import AdamState, adam_step
from .rng import derive

MAP_NORMALIZATION = "min(dE00 / 100, 1)"


def attention_map(features):
    """``sigmoid(mean over channels)``: an ``... x H x W x 1`` map strictly inside (0, 1)."""
    if features.shape[-1] < 1:
        raise ShapeError(f"attention map needs at least one channel, got {features.shape}")
    return T.activate(T.pool(features, "channel_avg"), "sigmoid")


def apply_attention(features, att):
    """Return ``(1 + att) * features`` with ``att`` broadcast across channels."""
    if att.shape[-1] != 1 or att.shape[:-1] != features.shape[:-1]:
        raise ShapeError(f"attention map {att.shape} does not match features {features.shape}")
    return T.elementwise(T.add_scalar(att, 1.0), features, "mul")


# Hooks that rewrite M before it is applied; used to probe the wiring.


def zero_attention(att):
    """Replace M by zeros (no gradient), which turns the attention into the identity."""
    return T.Tensor(np.zeros_like(att.data))


def detach_attention(att):
    """Keep M's values but cut the gradient path from the detector back into the attention net."""
    return T.Tensor(att.data.copy())


@dataclass
class LossBreakdown:
    total: T.Tensor
    attention: T.Tensor = None
    detection: T.Tensor = None

    def values(self):
        att = float(self.attention.data) if self.attention is not None else 0.0
        return float(self.total.data), att, float(self.detection.data)


def total_loss(y_ad, y_att, y):
    """``BCE(y_att, y) + BCE(y_ad, y)``; with ``y_att=None`` only the detection term remains."""
    y = np.asarray(y, dtype=np.float32).reshape(y_ad.shape)
    l_ad = T.bce(y_ad, y)
    if y_att is None:
        return LossBreakdown(l_ad, None, l_ad)
    l_att = T.bce(y_att, y.reshape(y_att.shape))
    return LossBreakdown(T.elementwise(l_att, l_ad, "add"), l_att, l_ad)


@dataclass
class ForwardResult:
    y_ad: T.Tensor
    y_att: T.Tensor = None
    taps: dict = field(default_factory=dict)


class LeaModel:
    """An attention network and a detection network joined at one point ``p``."""

    def __init__(self, caan_spec, adn_spec, point, seed=0, hook=None):
        validate_attention_alignment(adn_spec, caan_spec, point)
        check_downsampling(adn_spec, caan_spec)
        self.point = point
        self.seed = seed
        self.hook = hook
        self.caan = Network(caan_spec, derive(seed, "caan", "init"))
        self.adn = Network(adn_spec, derive(seed, "adn", "init"))
        if self.caan.shapes.output[-1] != 1:
            raise ModelError(f"attention network must end in one probability, got output {self.caan.shapes.output}")

    @property
    def params(self):
        out = {"caan/" + k: v for k, v in self.caan.params.items()}
        out.update({"adn/" + k: v for k, v in self.adn.params.items()})
        return out

    def forward(self, x, x_att, train=False, capture=False):
        """Run both branches; ``capture`` records the tensors around the attention point.

        ``taps`` then holds ``attention`` (M), ``caan`` (the features M came
        from), ``before`` and ``after`` (ADN features at the point).
        """
        caan_taps = {}
        y_att = self.caan.forward(x_att, train=train, taps=caan_taps)
        att = attention_map(caan_taps[self.point])
        if self.hook is not None:
            att = self.hook(att)
        taps = {"attention": att, "caan": caan_taps[self.point]} if capture else {}

        def inject(features):
            out = apply_attention(features, att)
            if capture:
                taps["before"], taps["after"] = features, out
            return out

        y_ad = self.adn.forward(x, train=train, point=self.point, hook=inject)
        return ForwardResult(y_ad, y_att, taps)

    def loss(self, batch, train=True):
        x, x_att, y = batch
        res = self.forward(x, x_att, train=train)
        return total_loss(res.y_ad, res.y_att, y)

    def predict(self, x, x_att):
        return self.forward(x, x_att, train=False).y_ad.data.reshape(-1)

    def state_dict(self):
        out = {"caan/" + k: v for k, v in self.caan.state_dict().items()}
        out.update({"adn/" + k: v for k, v in self.adn.state_dict().items()})
        return out

    def load_state_dict(self, state):
        for prefix, net in (("caan/", self.caan), ("adn/", self.adn)):
            net.load_state_dict({k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)})

    def metadata(self):
        return {
            "point": self.point,
            "seed": self.seed,
            "caan_spec": self.caan.spec.to_text(),
            "adn_spec": self.adn.spec.to_text(),
            "map_normalization": MAP_NORMALIZATION,
        }


def save_model(path, model, extra=None):
    """Write the tensor container at ``path`` and metadata at ``<path>.json``."""
    path = Path(path)
    checkpoint.save(path, model.state_dict())
    meta = dict(model.metadata(), **(extra or {}))
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path):
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    model = LeaModel(NetworkSpec.from_text(meta["caan_spec"]), NetworkSpec.from_text(meta["adn_spec"]), meta["point"], meta["seed"])
    model.load_state_dict(checkpoint.load(path))
    return model, meta


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ModelError(f"invalid training configuration {asdict(self)}")
        return self


def minibatches(n, size, rng):
    """Shuffled index batches; a trailing batch of one is dropped (batch statistics need two samples)."""
    order = rng.permutation(n)
    out = [order[i : i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out.pop()
    return out


def train(model, data, cfg=None):
    """Joint training with one Adam step over every parameter per batch.

    ``model`` exposes ``params`` and ``loss(batch, train)``; ``data`` is a
    tuple ``(x, x_att, y)`` of arrays with a shared leading axis (``x_att``
    may be ``None`` when the model ignores it). Returns the per-epoch history
    of mean ``(total, attention, detection)`` losses.
    """
    cfg = (cfg or TrainConfig()).validate()
    x, x_att, y = data
    y = np.asarray(y)
    if len(y) == 0:
        raise ModelError("training data is empty")
    if len(np.unique(y)) < 2:
        raise ModelError("training data must contain both labels")
    rng = derive(cfg.seed, "train", "shuffle")
    opt = AdamState(lr=cfg.lr)
    params = model.params
    history = []
    for _ in range(cfg.epochs):
        sums = np.zeros(3)
        batches = minibatches(len(y), cfg.batch_size, rng)
        for idx in batches:
            batch = (x[idx], None if x_att is None else x_att[idx], y[idx])
            parts = model.loss(batch, train=True)
            grads = T.backward(parts.total)
            adam_step(params, {n: grads[p] for n, p in params.items() if p in grads}, opt)
            sums += parts.values()
        history.append(tuple(float(v) for v in sums / len(batches)))
    return history


def predict(model, data, batch_size=16):
    """Eval-mode probabilities for every sample, in order."""
    x, x_att, _ = data
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model.predict(x[i : i + batch_size], None if x_att is None else x_att[i : i + batch_size]))
    return np.concatenate(out)
