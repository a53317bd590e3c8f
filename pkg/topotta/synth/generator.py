"""
Seeded synthetic tubular images with controllable domain shifts.

Labels are random smooth curves (random-walk control points smoothed by a
parametric spline) with optional side branches, dilated to a sampled
thickness. Images are drawn from the label through an intensity field,
optional contrast inversion, gamma, blur and additive noise.
"""
import logging
from dataclasses import dataclass, replace
from typing import Iterator, List, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import splev, splprep
from skimage.draw import line

from topotta.errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DomainSpec:
    """Appearance and geometry of one synthetic domain.

    Attributes:
        name (str): Domain name.
        n_curves (int): Main curves per image.
        thickness (Tuple[float, float]): Range of tube widths in pixels.
        curvature (float): Std-dev of the heading change between control points (radians).
        branch_prob (float): Chance that a curve grows one side branch.
        fg (float): Foreground intensity before inversion.
        bg (float): Background intensity before inversion.
        invert (bool): Invert the contrast.
        gamma (float): Gamma applied after inversion.
        blur_sigma (float): Gaussian blur of the image.
        noise_sigma (float): Additive Gaussian noise.
        image_size (int): Side of the square images.
    """

    name: str = "source"
    n_curves: int = 2
    thickness: Tuple[float, float] = (2.0, 3.5)
    curvature: float = 0.35
    branch_prob: float = 0.5
    fg: float = 0.8
    bg: float = 0.2
    invert: bool = False
    gamma: float = 1.0
    blur_sigma: float = 0.7
    noise_sigma: float = 0.05
    image_size: int = 128

    def validate(self, levels: int = 3) -> "DomainSpec":
        checks = [
            (self.n_curves >= 1, f"n_curves must be >= 1, got {self.n_curves}"),
            (1 <= self.thickness[0] <= self.thickness[1], f"thickness range {self.thickness} must satisfy 1 <= low <= high"),
            (0 <= self.branch_prob <= 1, f"branch_prob must be in [0, 1], got {self.branch_prob}"),
            (0 <= self.fg <= 1 and 0 <= self.bg <= 1, "fg and bg intensities must lie in [0, 1]"),
            (self.gamma > 0, f"gamma must be > 0, got {self.gamma}"),
            (self.blur_sigma >= 0 and self.noise_sigma >= 0, "blur and noise sigmas must be >= 0"),
            (self.image_size % (2 ** levels) == 0, f"image_size {self.image_size} is not divisible by 2**{levels}"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidArgumentError(message)
        return self


SOURCE = DomainSpec()
SHIFTED = replace(
    SOURCE,
    name="shifted",
    invert=True,
    noise_sigma=0.15,
    thickness=(SOURCE.thickness[0] * 1.5, SOURCE.thickness[1] * 1.5),
)
PRESETS = {"source": SOURCE, "shifted": SHIFTED}


def domain_preset(name: str, image_size: int = 128) -> DomainSpec:
    if name not in PRESETS:
        raise InvalidArgumentError(f"unknown domain {name!r}; choose from {', '.join(PRESETS)}")
    return replace(PRESETS[name], image_size=image_size)


def _random_walk(rng, start, heading: float, steps: int, step_len: float, curvature: float, size: int):
    points = [np.asarray(start, dtype=np.float64)]
    for _ in range(steps):
        heading += rng.normal(0.0, curvature)
        step = step_len * np.array([np.sin(heading), np.cos(heading)])
        points.append(np.clip(points[-1] + step, 0, size - 1))
    points = np.array(points)
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(np.abs(np.diff(points, axis=0)) > 1e-6, axis=1)
    return points[keep]


def _smooth(points: np.ndarray, size: int) -> np.ndarray:
    """Dense samples along a spline through ``points`` (rows, cols)."""
    if len(points) < 2:
        return points
    degree = min(3, len(points) - 1)
    tck, _ = splprep([points[:, 0], points[:, 1]], k=degree, s=len(points))
    rows, cols = splev(np.linspace(0.0, 1.0, 4 * size), tck)
    return np.clip(np.stack([rows, cols], axis=1), 0, size - 1)


def _draw(centerline: np.ndarray, path: np.ndarray):
    pixels = np.round(path).astype(int)
    if len(pixels) == 1:
        centerline[pixels[0, 0], pixels[0, 1]] = True
    for (r0, c0), (r1, c1) in zip(pixels, pixels[1:]):
        rr, cc = line(r0, c0, r1, c1)
        centerline[rr, cc] = True


def _curve(rng, spec: DomainSpec, centerline: np.ndarray) -> List[np.ndarray]:
    size = spec.image_size
    margin = size // 8
    start = rng.uniform(margin, size - margin, size=2)
    heading = rng.uniform(0, 2 * np.pi)
    path = _smooth(_random_walk(rng, start, heading, 6, size / 6.0, spec.curvature, size), size)
    _draw(centerline, path)
    paths = [path]
    if len(path) > 8 and rng.random() < spec.branch_prob:
        fork = int(rng.integers(len(path) // 4, 3 * len(path) // 4))
        local = path[min(fork + 1, len(path) - 1)] - path[fork - 1]
        side = rng.choice([-1.0, 1.0]) * rng.uniform(np.pi / 4, np.pi / 2)
        branch_heading = np.arctan2(local[0], local[1]) + side
        branch = _smooth(
            _random_walk(rng, path[fork], branch_heading, 3, size / 8.0, spec.curvature, size), size
        )
        # the smoothed branch need not start on the curve
        branch = np.vstack([path[fork][None], branch])
        _draw(centerline, branch)
        paths.append(branch)
    return paths


def render_label(spec: DomainSpec, rng) -> np.ndarray:
    """Union of the curves, each dilated to a tube of its sampled width.

    A pixel joins a tube when its distance to the centerline is below half
    the sampled thickness, so the mean width follows the sample.
    """
    size = spec.image_size
    label = np.zeros((size, size), dtype=bool)
    for _ in range(spec.n_curves):
        centerline = np.zeros((size, size), dtype=bool)
        _curve(rng, spec, centerline)
        thickness = rng.uniform(*spec.thickness)
        label |= ndimage.distance_transform_edt(~centerline) < thickness / 2.0
    return label


def render_image(spec: DomainSpec, label: np.ndarray, rng) -> np.ndarray:
    image = spec.bg + (spec.fg - spec.bg) * label.astype(np.float64)
    if spec.invert:
        image = 1.0 - image
    image = np.clip(image, 0.0, 1.0) ** spec.gamma
    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.blur_sigma)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_one(spec: DomainSpec, seed: int, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Image and label number ``index`` of the stream seeded with ``seed``."""
    rng = np.random.default_rng([seed, index])
    label = render_label(spec, rng)
    return render_image(spec, label, rng), label


def generate(spec: DomainSpec, n_images: int, seed: int = 0, levels: int = 3) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Iterator over ``n_images`` (image, label) pairs; pair ``i`` depends only on (spec, seed, i).

    Raises:
        InvalidArgumentError: If ``n_images < 1`` or ``spec`` is invalid.
    """
    if n_images < 1:
        raise InvalidArgumentError(f"n_images must be >= 1, got {n_images}")
    spec.validate(levels)
    logger.debug("generating %d %s images, seed %d", n_images, spec.name, seed)
    return (generate_one(spec, seed, index) for index in range(n_images))
