"""Differentiable keypoint detection on single-channel images.

A small convolutional stack produces one heatmap per keypoint over a
coarse feature lattice. Each heatmap is normalized with a spatial softmax
and reduced to its expected lattice coordinate, which is then rescaled to
pixel coordinates. Training renders Gaussian bumps at the predicted and
the true coordinates and minimizes their mean squared difference, so the
supervision signal stays dense even though the output is a coordinate
list.

Lattice convention: coordinates are cell indices (0 .. H'-1), not cell
centers; the pixel-domain mapping is x_px = H * x_lattice / H'. The first
coordinate runs along image height.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import Adam, Conv2d, Parameter, Tensor, no_grad
from .keypoints import KeypointSet
from .validation import check_images, check_keypoint_array

__all__ = [
    "DetectorConfig",
    "KeypointDetector",
    "expected_coordinates",
    "map_to_image",
    "render_gaussian",
    "detector_loss",
    "save_dataset",
    "load_dataset",
    "write_pgm",
    "read_pgm",
]


@dataclass(frozen=True)
class DetectorConfig:
    """Static description of one detector: lattice sizes and conv stack.

    ``conv_stack`` lists (out_channels, kernel_size, stride) for the
    hidden layers; a final layer with ``n_keypoints`` output channels and
    stride ``final_stride`` is appended. Image extents must be divisible
    by the feature extents so the lattice-to-pixel mapping is exact.
    """

    n_keypoints: int = 8
    height: int = 64
    width: int = 64
    sigma: float = 2.0
    conv_stack: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (16, 3, 2))
    final_kernel: int = 3
    final_stride: int = 2
    learning_rate: float = 1e-3

    @property
    def feature_height(self) -> int:
        return self.height // self.total_stride

    @property
    def feature_width(self) -> int:
        return self.width // self.total_stride

    @property
    def total_stride(self) -> int:
        s = self.final_stride
        for _, _, stride in self.conv_stack:
            s *= stride
        return s

    def __post_init__(self):
        if self.n_keypoints < 1:
            raise ValueError("n_keypoints must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.height % self.total_stride or self.width % self.total_stride:
            raise ValueError(
                f"image extents ({self.height}, {self.width}) must be divisible "
                f"by the total conv stride {self.total_stride}")


def _build_conv_layers(config: DetectorConfig, rng: np.random.Generator) -> list[Conv2d]:
    layers = []
    in_ch = 1
    for i, (out_ch, k, stride) in enumerate(config.conv_stack):
        layers.append(Conv2d(in_ch, out_ch, k, rng, stride=stride,
                             padding="same", name=f"detector/conv{i}"))
        in_ch = out_ch
    layers.append(Conv2d(in_ch, config.n_keypoints, config.final_kernel, rng,
                         stride=config.final_stride, padding="same",
                         name=f"detector/conv{len(config.conv_stack)}"))
    return layers


def extract_features(images: Tensor, layers: list[Conv2d]) -> Tensor:
    """Run the conv stack: (n, H, W) images -> (n, K, H', W') heatmaps."""
    x = ad.reshape(images, (images.shape[0], 1) + images.shape[1:])
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = ad.relu(x)
    return x


def expected_coordinates(feature_maps: Tensor) -> Tensor:
    """Spatial-softmax expectation: (n, K, H', W') -> (n, K, 2) lattice coords.

    Each channel is softmax-normalized over its flattened lattice and the
    expected (row, col) cell index is returned; outputs always lie inside
    the lattice hull and the whole map is differentiable.
    """
    n, k, fh, fw = feature_maps.shape
    flat = ad.reshape(feature_maps, (n, k, fh * fw))
    weights = ad.softmax(flat, axis=-1)
    grid_r, grid_c = np.meshgrid(np.arange(fh, dtype=np.float64),
                                 np.arange(fw, dtype=np.float64), indexing="ij")
    coords = np.stack([grid_r.reshape(-1), grid_c.reshape(-1)], axis=1)
    return ad.matmul(weights, Tensor(coords))


def map_to_image(coords: Tensor | np.ndarray, config: DetectorConfig):
    """Rescale lattice coordinates to pixel coordinates.

    x_px = H * x / H' and y_px = W * y / W'; identity when the feature
    lattice equals the image lattice.
    """
    scale = np.array([config.height / config.feature_height,
                      config.width / config.feature_width])
    if isinstance(coords, Tensor):
        return coords * Tensor(scale)
    return np.asarray(coords) * scale


def render_gaussian(keypoints: Tensor | np.ndarray, sigma: float,
                    height: int, width: int) -> Tensor:
    """Render per-keypoint Gaussian bumps exp(-|c - k|^2 / (2 sigma^2)).

    ``keypoints`` is (n, K, 2) in pixel coordinates; the result is a
    (n, K, H, W) channel stack, differentiable w.r.t. the coordinates.
    The aggregate single-map form is the sum over the K channels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kp = keypoints if isinstance(keypoints, Tensor) else Tensor(keypoints)
    n, k, _ = kp.shape
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    kx = ad.reshape(ad.getitem(kp, (slice(None), slice(None), 0)), (n, k, 1))
    ky = ad.reshape(ad.getitem(kp, (slice(None), slice(None), 1)), (n, k, 1))
    dr2 = (kx - Tensor(rows.reshape(1, 1, height))) ** 2      # (n, K, H)
    dc2 = (ky - Tensor(cols.reshape(1, 1, width))) ** 2       # (n, K, W)
    dist2 = (ad.reshape(dr2, (n, k, height, 1))
             + ad.reshape(dc2, (n, k, 1, width)))
    return ad.texp(dist2 * (-1.0 / (2.0 * sigma * sigma)))


def detector_loss(predicted: Tensor, truth: np.ndarray,
                  config: DetectorConfig) -> Tensor:
    """Mean squared difference between rendered heatmap channel stacks.

    Zero exactly when the coordinate sets agree index-wise; symmetric in
    its arguments.
    """
    truth = check_keypoint_array(truth, config.n_keypoints)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"predicted keypoints {predicted.shape} != truth {truth.shape}")
    pred_maps = render_gaussian(predicted, config.sigma, config.height, config.width)
    with no_grad():
        truth_maps = render_gaussian(truth, config.sigma, config.height, config.width)
    return ad.tmean((pred_maps - truth_maps) ** 2)


class KeypointDetector(BaseEstimator):
    """sklearn-style estimator: images in, ordered pixel keypoints out.

    ``fit(images, keypoints)`` trains the conv stack with Adam on the
    heatmap-reconstruction loss; ``predict(images)`` returns (n, K, 2)
    pixel coordinates with no gradient recording. Prediction is safe to
    call concurrently once fitted; fitting is single-threaded.
    """

    def __init__(self, n_keypoints=8, height=64, width=64, sigma=2.0,
                 conv_stack=((16, 3, 2), (16, 3, 2)), final_kernel=3,
                 final_stride=2, learning_rate=1e-3, n_steps=2000,
                 batch_size=16, seed=0):
        self.n_keypoints = n_keypoints
        self.height = height
        self.width = width
        self.sigma = sigma
        self.conv_stack = conv_stack
        self.final_kernel = final_kernel
        self.final_stride = final_stride
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.seed = seed

    @property
    def config(self) -> DetectorConfig:
        return DetectorConfig(
            n_keypoints=self.n_keypoints, height=self.height, width=self.width,
            sigma=self.sigma, conv_stack=tuple(tuple(s) for s in self.conv_stack),
            final_kernel=self.final_kernel, final_stride=self.final_stride,
            learning_rate=self.learning_rate)

    # -- training ----------------------------------------------------

    def fit(self, images, keypoints):
        config = self.config
        images = check_images(images, config.height, config.width)
        if images.shape[0] == 0:
            raise ValueError("cannot fit on an empty dataset")
        truths = check_keypoint_array(keypoints, config.n_keypoints, images.shape[0])
        rng = np.random.default_rng(self.seed)
        self.layers_ = _build_conv_layers(config, rng)
        params = [p for layer in self.layers_ for p in layer.parameters()]
        optimizer = Adam(params, lr=config.learning_rate)
        n = images.shape[0]
        batch = min(self.batch_size, n)
        self.loss_history_ = []
        for _ in range(self.n_steps):
            idx = rng.choice(n, size=batch, replace=False)
            loss = self._loss_on(images[idx], truths[idx], config)
            loss.backward()
            optimizer.step()
            self.loss_history_.append(loss.item())
        return self

    def _loss_on(self, images: np.ndarray, truths: np.ndarray,
                 config: DetectorConfig) -> Tensor:
        fm = extract_features(Tensor(images), self.layers_)
        coords = map_to_image(expected_coordinates(fm), config)
        return detector_loss(coords, truths, config)

    # -- inference ----------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "layers_"):
            raise NotFittedError(
                "this KeypointDetector is not fitted; call fit or load_params")

    def predict(self, images) -> np.ndarray:
        self._check_fitted()
        config = self.config
        images = check_images(images, config.height, config.width)
        with no_grad():
            fm = extract_features(Tensor(images), self.layers_)
            coords = map_to_image(expected_coordinates(fm), config)
        return coords.data

    def detect(self, image) -> KeypointSet:
        """Single-image convenience wrapper returning a KeypointSet."""
        return KeypointSet(self.predict(np.asarray(image)[None])[0])

    def score(self, images, keypoints) -> float:
        """Negative mean per-keypoint pixel error (greater is better)."""
        return -self.pixel_error(images, keypoints)

    def pixel_error(self, images, keypoints) -> float:
        truths = check_keypoint_array(keypoints, self.n_keypoints)
        predicted = self.predict(images)
        return float(np.linalg.norm(predicted - truths, axis=2).mean())

    # -- persistence ----------------------------------------------------

    def parameter_dict(self) -> dict[str, np.ndarray]:
        self._check_fitted()
        return {p.name: p.data for layer in self.layers_ for p in layer.parameters()}

    def save_params(self, path) -> None:
        ad.save_archive(path, self.parameter_dict())

    def load_params(self, path) -> "KeypointDetector":
        stored = ad.load_archive(path)
        rng = np.random.default_rng(self.seed)
        self.layers_ = _build_conv_layers(self.config, rng)
        for layer in self.layers_:
            for p in layer.parameters():
                if p.name not in stored:
                    raise ValueError(f"checkpoint is missing parameter {p.name!r}")
                if stored[p.name].shape != p.data.shape:
                    raise ValueError(
                        f"checkpoint parameter {p.name!r} has shape "
                        f"{stored[p.name].shape}, expected {p.data.shape}")
                p.data = stored[p.name].astype(p.data.dtype)
        return self


# -- on-disk dataset ---------------------------------------------------------
#
# One directory per task family: images as binary PGM (P5, maxval 255),
# truths as plain text, one "k x y" line per keypoint.


def write_pgm(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1
    w, h, maxval = (int(f) for f in fields)
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).astype(np.float64) / float(maxval)


def save_dataset(out_dir, images: np.ndarray, truths: np.ndarray) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (image, kps) in enumerate(zip(images, truths)):
        write_pgm(out / f"{i:05d}.pgm", image)
        lines = [f"{k} {x:.6f} {y:.6f}" for k, (x, y) in enumerate(kps)]
        (out / f"{i:05d}.txt").write_text("\n".join(lines) + "\n")


def load_dataset(in_dir) -> tuple[np.ndarray, np.ndarray]:
    root = Path(in_dir)
    image_paths = sorted(root.glob("*.pgm"))
    if not image_paths:
        raise FileNotFoundError(f"no PGM images under {in_dir}")
    images, truths = [], []
    for img_path in image_paths:
        images.append(read_pgm(img_path))
        rows = []
        for line in img_path.with_suffix(".txt").read_text().splitlines():
            _, x, y = line.split()
            rows.append((float(x), float(y)))
        truths.append(rows)
    return np.asarray(images), np.asarray(truths)
