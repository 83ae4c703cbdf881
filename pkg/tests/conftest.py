"""Shared fixtures and oracles for the test suite."""

import numpy as np
import torch

from rft.homography import Homography, HomographyConfig, make_crop_pair, sample_homography
from rft.losses import total_loss
from rft.model import forward_maps


def exact_average_precision(distances, flags):
    """Brute-force AP: rank by distance ascending, average precision at
    each positive's rank."""
    order = np.argsort(np.asarray(distances), kind="stable")
    flags = np.asarray(flags, dtype=bool)[order]
    hits = 0
    precisions = []
    for rank, is_pos in enumerate(flags, start=1):
        if is_pos:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions))


def random_ranking_instance(rng, max_candidates=20, bins=100):
    """Random (query, candidates, flags, distances) whose ranking is
    resolvable at the histogram resolution.

    Candidate pairs closer than one bin width are sub-quantization ties:
    there the brute-force oracle's stable-sort order is arbitrary, so such
    draws are rejected rather than compared.
    """
    min_gap = 2.0 / (bins - 1)
    while True:
        m = int(rng.integers(2, max_candidates + 1))
        q = rng.normal(size=3)
        q /= np.linalg.norm(q)
        cands = rng.normal(size=(m, 3))
        cands /= np.linalg.norm(cands, axis=1, keepdims=True)
        flags = rng.random(m) < 0.4
        if not flags.any():
            flags[int(rng.integers(m))] = True
        dists = np.linalg.norm(cands - q, axis=1)
        if m == 1 or np.diff(np.sort(dists)).min() >= min_gap:
            return q, cands, flags, dists


def build_toy_pair(seed, crop_size=64, image_size=160, gentle=True):
    """Random textured image -> homography crop pair, for loss-level tests."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, size=(image_size, image_size, 3))
    cfg = HomographyConfig(
        max_rotation_deg=10.0 if gentle else 25.0,
        scale_range=(0.9, 1.1) if gentle else (0.7, 1.4),
        max_perspective=0.02 if gentle else 0.1,
        max_translation_frac=0.05,
        seed=seed,
    )
    h = sample_homography(cfg, draw_seed=seed, ref_size=crop_size)
    return img, make_crop_pair(img, img, h, crop_size=crop_size, draw_seed=seed)


def pair_to_tensors(pair, dtype=torch.float64):
    a = torch.as_tensor(pair.crop_a, dtype=dtype)
    b = torch.as_tensor(pair.crop_b, dtype=dtype)
    return a, b


def finite_difference_check(net, pair, loss_cfg, n_samples, seed=0, step=1e-5):
    """Compare autograd gradients of total_loss against central differences.

    kappa is frozen at the base-point batch value so both routes evaluate
    the same function of the parameters. Returns the fraction of sampled
    parameters whose relative error is within 1e-3.
    """
    net = net.double()
    crop_a, crop_b = pair_to_tensors(pair)

    def evaluate(frozen_kappa):
        maps_a = forward_maps(net, crop_a)
        maps_b = forward_maps(net, crop_b)
        return total_loss(maps_a, maps_b, pair.warp, loss_cfg, kappa=frozen_kappa)

    _, base_report = evaluate(None)
    kappa0 = base_report.kappa_used

    net.zero_grad()
    loss, _ = evaluate(kappa0)
    loss.backward()
    params = [p for p in net.parameters()]
    grads = [p.grad.detach().clone() for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    total = sizes.sum()
    picks = rng.choice(total, size=min(n_samples, total), replace=False)

    ok = 0
    with torch.no_grad():
        for flat in picks:
            ti = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
            li = int(flat - (np.cumsum(sizes)[ti] - sizes[ti]))
            p = params[ti].view(-1)
            orig = p[li].item()

            p[li] = orig + step
            hi, _ = evaluate(kappa0)
            p[li] = orig - step
            lo, _ = evaluate(kappa0)
            p[li] = orig

            fd = (hi.item() - lo.item()) / (2 * step)
            ad = grads[ti].view(-1)[li].item()
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
            if rel <= 1e-3:
                ok += 1
    return ok / len(picks)
