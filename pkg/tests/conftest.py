import time

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from refsr import images, vgg

torch.set_num_threads(1)


def texture(seed: int, size: int = 64) -> np.ndarray:
    """Smooth multi-scale random colour texture in [0, 1], 8-bit quantized."""
    rng = np.random.default_rng(seed)
    out = np.zeros((size, size, 3))
    for sigma, w in ((8, 1.0), (4, 0.7), (2, 0.5)):
        out += w * sigma * gaussian_filter(rng.standard_normal((size, size, 3)), (sigma, sigma, 0))
    out -= out.min()
    out /= out.max()
    return images.quantize(out)


@pytest.fixture(scope="session")
def vgg_weights(tmp_path_factory):
    return vgg.random_vgg19_archive(tmp_path_factory.mktemp("weights") / "vgg19.npz", seed=0)


@pytest.fixture(scope="session")
def perceptual(vgg_weights):
    return vgg.PerceptualFeatures(vgg_weights)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def matcher_samples(n=4, size=64, seed=0):
    from refsr import match_train
    out = []
    for i in range(n):
        hr = texture(seed + i, size)
        ref, hom = match_train.synthesize_pair(hr, 100 + seed + i)
        out.append(match_train.make_sample(hr, images.quantize(ref), hom))
    return out


@pytest.fixture(scope="session")
def smoke_matchers():
    """Teacher then student, 200 iterations each on 4 synthetic pairs."""
    from refsr import match_train
    start = time.perf_counter()
    samples = matcher_samples()
    cfg = match_train.TrainConfig(batch_size=4, lr_patch=16, ref_patch=64)
    aee0 = match_train.mean_aee(match_train.ContrastiveMatcher("random", 1), samples)
    teacher, t_curve = match_train.train_teacher(samples, cfg, seed=0, iters=200)
    student, s_curve = match_train.train_student(samples, teacher, cfg, seed=1, iters=200)
    return dict(samples=samples, teacher=teacher, t_curve=t_curve, student=student,
                s_curve=s_curve, aee0=aee0, aee=match_train.mean_aee(student, samples),
                elapsed=time.perf_counter() - start)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
