"""Two-tower convolutional action-value network with hand-written backprop and SGD.

Images are batched as (N, H, W, C).  Each tower is conv -> maxpool -> conv ->
maxpool -> dense -> ReLU; the trunk concatenates [state tower, state place
vector, action tower, action place vector] and applies dense -> ReLU -> dense
-> ReLU -> dense(1).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, RegressorMixin


class ContractError(ValueError):
    """Raised when inputs violate the network's shape or finiteness contract."""


# ---------------------------------------------------------------------- layers

class Layer:
    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def param_names(self):
        return list(self.params)


class Conv2D(Layer):
    """Valid convolution, stride 1, via im2col."""

    def __init__(self, k: int, c_in: int, c_out: int, rng, dtype, input_grad: bool = True):
        fan_in = k * k * c_in
        self.k = k
        self.input_grad = input_grad  # False for a first layer fed by data
        self.params = {
            "w": (rng.standard_normal((fan_in, c_out)) * np.sqrt(2.0 / fan_in)).astype(dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }
        self.grads = {n: np.zeros_like(p) for n, p in self.params.items()}

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.k
        if h < k or w < k:
            raise ContractError(f"image {h}x{w} smaller than kernel {k}")
        win = sliding_window_view(x, (k, k), axis=(1, 2))  # n, ho, wo, c, k, k
        ho, wo = win.shape[1], win.shape[2]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
        self._cache = (x.shape, cols)
        y = cols @ self.params["w"] + self.params["b"]
        return y.reshape(n, ho, wo, -1)

    def backward(self, dy):
        shape, cols = self._cache
        n, h, w, c = shape
        k = self.k
        ho, wo = dy.shape[1], dy.shape[2]
        d2 = dy.reshape(-1, dy.shape[3])
        self.grads["w"] = cols.T @ d2
        self.grads["b"] = d2.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = (d2 @ self.params["w"].T).reshape(n, ho, wo, k, k, c)
        dx = np.zeros(shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        return dx


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        if ho == 0 or wo == 0:
            raise ContractError(f"feature map {h}x{w} too small to pool")
        xc = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
        xc = xc.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
        arg = xc.argmax(axis=4)
        self._cache = (x.shape, arg)
        return np.take_along_axis(xc, arg[..., None], axis=4)[..., 0]

    def backward(self, dy):
        shape, arg = self._cache
        n, h, w, c = shape
        ho, wo = dy.shape[1], dy.shape[2]
        d = np.zeros((n, ho, wo, c, 4), dtype=dy.dtype)
        np.put_along_axis(d, arg[..., None], dy[..., None], axis=4)
        d = d.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, :2 * ho, :2 * wo, :] = d
        return dx


class Flatten(Layer):
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng, dtype):
        self.params = {
            "w": (rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)).astype(dtype),
            "b": np.zeros(n_out, dtype=dtype),
        }
        self.grads = {n: np.zeros_like(p) for n, p in self.params.items()}

    def forward(self, x):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads["w"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["w"].T


class ReLU(Layer):
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Concat(Layer):
    """Concatenates 2-D inputs along features; backward splits the gradient."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, xs):
        self._widths = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, dy):
        edges = np.cumsum(self._widths)[:-1]
        return np.split(dy, edges, axis=1)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            for n in layer.params:
                out.append((f"{prefix}.{i}.{n}", layer, n))
        return out


# --------------------------------------------------------------------- network

@dataclass(frozen=True)
class NetConfig:
    image_size: int = 24
    channels: int = 12
    place_dim: int = 0
    kernels: tuple = (5, 5)
    maps: tuple = (20, 50)
    tower_out: int = 50
    trunk: int = 32

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "maps", tuple(int(m) for m in self.maps))
        if len(self.kernels) != 2 or len(self.maps) != 2:
            raise ValueError("towers have exactly two conv layers")
        if min(self.image_size, self.channels, self.tower_out, self.trunk) < 1 or self.place_dim < 0:
            raise ValueError("network sizes must be positive")
        if self.conv_output_side < 1:
            raise ValueError(f"image_size {self.image_size} too small for kernels {self.kernels}")

    @property
    def conv_output_side(self) -> int:
        s = self.image_size
        for k in self.kernels:
            s = (s - k + 1) // 2
        return s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"], d["maps"] = list(self.kernels), list(self.maps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


DESK_NET = NetConfig(image_size=24, channels=12, tower_out=50, trunk=32)
PAPER_NET = NetConfig(image_size=60, channels=12, tower_out=100, trunk=60)


def _tower(cfg: NetConfig, rng, dtype) -> Sequential:
    (k1, k2), (m1, m2) = cfg.kernels, cfg.maps
    flat = cfg.conv_output_side ** 2 * m2
    return Sequential([Conv2D(k1, cfg.channels, m1, rng, dtype, input_grad=False), MaxPool2D(),
                       Conv2D(k2, m1, m2, rng, dtype), MaxPool2D(), Flatten(),
                       Dense(flat, cfg.tower_out, rng, dtype), ReLU()])


class QNetwork:
    """Q(s, a) for state encoding (image, place one-hot) and action encoding (image, place one-hot)."""

    def __init__(self, config: NetConfig = DESK_NET, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.state_tower = _tower(config, rng, self.dtype)
        self.action_tower = _tower(config, rng, self.dtype)
        self.concat = Concat()
        width = 2 * (config.tower_out + config.place_dim)
        self.trunk = Sequential([Dense(width, config.trunk, rng, self.dtype), ReLU(),
                                 Dense(config.trunk, config.trunk, rng, self.dtype), ReLU(),
                                 Dense(config.trunk, 1, rng, self.dtype)])

    # parameter access in a fixed canonical order
    def named_params(self):
        return (self.state_tower.named_params("state") + self.action_tower.named_params("action")
                + self.trunk.named_params("trunk"))

    def parameters(self):
        return [layer.params[n] for _, layer, n in self.named_params()]

    def gradients(self):
        return [layer.grads[n] for _, layer, n in self.named_params()]

    def set_parameters(self, arrays):
        named = self.named_params()
        if len(arrays) != len(named):
            raise ContractError("parameter count mismatch")
        for (name, layer, n), a in zip(named, arrays):
            if a.shape != layer.params[n].shape:
                raise ContractError(f"{name}: shape {a.shape} != {layer.params[n].shape}")
            layer.params[n] = np.array(a, dtype=self.dtype)

    def copy(self) -> "QNetwork":
        new = QNetwork(self.config, 0, self.dtype)
        new.set_parameters([p.copy() for p in self.parameters()])
        return new

    def astype(self, dtype) -> "QNetwork":
        new = QNetwork(self.config, 0, dtype)
        new.set_parameters(self.parameters())
        return new

    # ---------------------------------------------------------------- forward
    def _check(self, img, place, n=None):
        cfg = self.config
        img = np.asarray(img, dtype=self.dtype)
        place = np.asarray(place, dtype=self.dtype)
        if img.ndim == 3:
            img = img[None]
        if place.ndim == 1:
            place = place[None]
        if img.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ContractError(f"image shape {img.shape[1:]} does not match network config")
        if place.shape[1] != cfg.place_dim:
            raise ContractError(f"place vector length {place.shape[1]} != {cfg.place_dim}")
        if place.shape[0] != img.shape[0]:
            raise ContractError("image and place batch sizes differ")
        return img, place

    def forward(self, s_img, s_place, a_img, a_place) -> np.ndarray:
        """Batched Q-values, shape (N,)."""
        s_img, s_place = self._check(s_img, s_place)
        a_img, a_place = self._check(a_img, a_place)
        if len(s_img) != len(a_img):
            raise ContractError("state and action batch sizes differ")
        hs = self.state_tower.forward(s_img)
        ha = self.action_tower.forward(a_img)
        z = self.concat.forward([hs, s_place, ha, a_place])
        return self.trunk.forward(z)[:, 0]

    def q_values(self, s_img, s_place, a_imgs, a_places) -> np.ndarray:
        """Q of one state against many actions, evaluated row by row.

        BLAS results depend on batch shape in the last bits, so single-row
        evaluation is the canonical form: it matches ``forward`` on a batch of
        one exactly, and identical actions always receive identical values.
        """
        s_img, s_place = self._check(s_img, s_place)
        a_imgs, a_places = self._check(a_imgs, a_places)
        hs = self.state_tower.forward(s_img)
        out = np.empty(len(a_imgs), dtype=self.dtype)
        for i in range(len(a_imgs)):
            ha = self.action_tower.forward(a_imgs[i:i + 1])
            z = self.concat.forward([hs, s_place, ha, a_places[i:i + 1]])
            out[i] = self.trunk.forward(z)[0, 0]
        return out

    def evaluate(self, s_img, s_place, a_img, a_place) -> np.ndarray:
        """Canonical row-by-row Q for a batch of (state, action) pairs."""
        s_img, s_place = self._check(s_img, s_place)
        a_img, a_place = self._check(a_img, a_place)
        return np.array([self.forward(s_img[i:i + 1], s_place[i:i + 1], a_img[i:i + 1],
                                      a_place[i:i + 1])[0] for i in range(len(s_img))],
                        dtype=self.dtype)

    def __call__(self, *args):
        return self.forward(*args)

    # --------------------------------------------------------------- backward
    def backward(self, s_img, s_place, a_img, a_place, targets):
        """Mean squared error against ``targets``; fills gradients, returns (gradients, loss)."""
        targets = np.asarray(targets, dtype=self.dtype).reshape(-1)
        if len(targets) == 0:
            raise ContractError("empty batch")
        if not np.all(np.isfinite(targets)):
            raise ContractError("non-finite target")
        q = self.forward(s_img, s_place, a_img, a_place)
        if len(q) != len(targets):
            raise ContractError("target count does not match batch")
        err = q - targets
        loss = float(np.mean(err.astype(np.float64) ** 2))
        dq = (2.0 / len(err)) * err
        dz = self.trunk.backward(dq[:, None].astype(self.dtype))
        dhs, _, dha, _ = self.concat.backward(dz)
        self.state_tower.backward(dhs)
        self.action_tower.backward(dha)
        return [g.copy() for g in self.gradients()], loss


# ------------------------------------------------------------------ optimizer

@dataclass
class SgdConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    iterations_per_round: int = 5000
    weight_init: str = "he"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_init != "he":
            raise ValueError(f"unsupported weight_init {self.weight_init!r}")


@dataclass
class SgdState:
    velocity: list = field(default_factory=list)


def sgd_step(net: QNetwork, gradients, config: SgdConfig, state: SgdState | None = None) -> SgdState:
    """v <- momentum * v - lr * g;  w <- w + v (in place)."""
    state = state if state is not None else SgdState()
    params = net.parameters()
    if len(gradients) != len(params):
        raise ContractError("gradient list does not match parameters")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    mu = net.dtype.type(config.momentum)
    lr = net.dtype.type(config.learning_rate)
    for p, g, v in zip(params, gradients, state.velocity):
        if g.shape != p.shape:
            raise ContractError("gradient shape mismatch")
        v *= mu
        v -= lr * g
        p += v
    return state


# ------------------------------------------------------------------- file I/O

MAGIC = b"DQNW"
VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(net: QNetwork, path) -> None:
    """magic, version, architecture ints, per-array dims, then float64 little-endian values."""
    cfg = net.config
    params = net.parameters()
    arch = [cfg.image_size, cfg.channels, cfg.place_dim, *cfg.kernels, *cfg.maps,
            cfg.tower_out, cfg.trunk]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack(f"<{len(arch)}I", *arch))
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_weights(path, expected: NetConfig | None = None, dtype=np.float32) -> QNetwork:
    data = open(path, "rb").read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"{path}: truncated weight file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    a = struct.unpack("<9I", take(36))
    cfg = NetConfig(a[0], a[1], a[2], (a[3], a[4]), (a[5], a[6]), a[7], a[8])
    if expected is not None and cfg != expected:
        raise WeightFileError(f"{path}: architecture {cfg} does not match expected {expected}")
    net = QNetwork(cfg, 0, dtype)
    (count,) = struct.unpack("<I", take(4))
    shapes = []
    for _ in range(count):
        (nd,) = struct.unpack("<I", take(4))
        shapes.append(struct.unpack(f"<{nd}I", take(4 * nd)))
    expected_shapes = [p.shape for p in net.parameters()]
    if [tuple(s) for s in shapes] != expected_shapes:
        raise WeightFileError(f"{path}: layer dims do not match architecture")
    arrays = []
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(take(8 * n), dtype="<f8").reshape(s))
    if pos != len(data):
        raise WeightFileError(f"{path}: trailing bytes")
    net.set_parameters(arrays)
    return net


# --------------------------------------------------------- estimator wrapper

@dataclass
class QBatch:
    """Encoded (state, action) inputs; arrays share the leading batch dimension."""
    s_img: np.ndarray
    s_place: np.ndarray
    a_img: np.ndarray
    a_place: np.ndarray

    def __len__(self):
        return len(self.s_img)

    def take(self, idx) -> "QBatch":
        return QBatch(self.s_img[idx], self.s_place[idx], self.a_img[idx], self.a_place[idx])


class QValueRegressor(RegressorMixin, BaseEstimator):
    """Estimator view of the value network: ``fit`` runs minibatch SGD on (QBatch, targets).

    ``warm_start=True`` keeps weights and momentum across ``fit`` calls, which
    is how the batch-Sarsa loop refits the same network every round.
    """

    def __init__(self, image_size=24, channels=12, place_dim=0, kernels=(5, 5), maps=(20, 50),
                 tower_out=50, trunk=32, learning_rate=1e-3, momentum=0.9, batch_size=32,
                 iterations=5000, seed=0, warm_start=True, dtype="float32"):
        self.image_size = image_size
        self.channels = channels
        self.place_dim = place_dim
        self.kernels = kernels
        self.maps = maps
        self.tower_out = tower_out
        self.trunk = trunk
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.iterations = iterations
        self.seed = seed
        self.warm_start = warm_start
        self.dtype = dtype

    def net_config(self) -> NetConfig:
        return NetConfig(self.image_size, self.channels, self.place_dim, tuple(self.kernels),
                         tuple(self.maps), self.tower_out, self.trunk)

    def sgd_config(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.batch_size, self.iterations,
                         "he", self.seed)

    def _init(self):
        self.net_ = QNetwork(self.net_config(), self.seed, np.dtype(self.dtype))
        self.opt_state_ = SgdState()
        self.rng_ = np.random.default_rng(self.seed + 1)
        self.n_iter_ = 0

    def set_network(self, net: QNetwork) -> "QValueRegressor":
        if net.config != self.net_config():
            raise ContractError("network architecture differs from estimator parameters")
        self._init()
        self.net_ = net
        return self

    def fit(self, X, y, iterations: int | None = None):
        """Minibatch SGD on ``X`` (a QBatch, or any object with len/take) against ``y``."""
        if not (self.warm_start and hasattr(self, "net_")):
            self._init()
        y = np.asarray(y, dtype=np.float64)
        n = len(X)
        if n == 0:
            raise ContractError("cannot fit on an empty batch")
        its = self.iterations if iterations is None else iterations
        cfg = self.sgd_config()
        losses = []
        for _ in range(its):
            idx = self.rng_.integers(0, n, size=min(cfg.batch_size, n))
            b = X.take(idx)
            grads, loss = self.net_.backward(b.s_img, b.s_place, b.a_img, b.a_place, y[idx])
            sgd_step(self.net_, grads, cfg, self.opt_state_)
            losses.append(loss)
            self.n_iter_ += 1
        self.loss_curve_ = losses
        return self

    def predict(self, X, chunk: int = 256) -> np.ndarray:
        """Canonical (row-by-row) predictions; ``X`` is a QBatch or any object with len/take."""
        out = np.empty(len(X), dtype=np.float64)
        for s in range(0, len(X), chunk):
            idx = np.arange(s, min(s + chunk, len(X)))
            b = X.take(idx)
            out[idx] = self.net_.evaluate(b.s_img, b.s_place, b.a_img, b.a_place)
        return out
