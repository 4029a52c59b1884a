"""Feedback matrix designs built from the energy kernel.

Three per-block designs, all returning orthogonal (unit-norm lossless) blocks
in the pressure domain:

* ``householder``: a rank-one update of the block's specular permutation;
  cheap, ignores kernel magnitudes beyond the permutation.
* ``sinkhorn``: balance the energy block to doubly stochastic with
  Sinkhorn-Knopp, then find the closest orthogonal matrix whose elementwise
  square matches it; the balancing scalings are reported so the network can
  compensate them in the adjacent delay-line gains.
* ``uniform``: scattering-controlled blend of the specular permutation with
  an even spread; doubly stochastic by construction.

Blocks follow the kernel layout: rows are incoming lines, columns outgoing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DESIGNS = ("householder", "sinkhorn", "uniform")


class SinkhornDivergenceError(RuntimeError):
    """Sinkhorn-Knopp cannot balance the block (no total support)."""


def specular_permutation(block: np.ndarray) -> np.ndarray:
    """Greedy in->out assignment maximizing kernel energy.

    Repeatedly selects the largest remaining entry, retiring its row and
    column; ties go to the smallest row index, then column index.  Returns
    ``perm`` with ``perm[row] = col``.  An all-zero block degenerates to the
    identity assignment.
    """
    m = block.shape[0]
    if block.shape != (m, m):
        raise ValueError("specular_permutation needs a square block")
    rows, cols = np.divmod(np.arange(m * m), m)
    order = np.lexsort((cols, rows, -block.ravel()))
    perm = np.full(m, -1, dtype=int)
    used_cols = np.zeros(m, dtype=bool)
    assigned = 0
    for k in order:
        r, c = rows[k], cols[k]
        if perm[r] >= 0 or used_cols[c]:
            continue
        perm[r] = c
        used_cols[c] = True
        assigned += 1
        if assigned == m:
            break
    return perm


def householder_block(perm: np.ndarray, m: int = None) -> np.ndarray:
    """Orthogonal block with (2-M)/M on the permutation, 2/M elsewhere."""
    m = len(perm) if m is None else m
    block = np.full((m, m), 2.0 / m)
    block[np.arange(m), perm] = (2.0 - m) / m
    return block


def uniform_block(perm: np.ndarray, sigma: float, m: int = None) -> np.ndarray:
    """Energy block: 1-sigma on the permutation, sigma/(M-1) spread elsewhere."""
    m = len(perm) if m is None else m
    if m == 1:
        return np.ones((1, 1))
    block = np.full((m, m), sigma / (m - 1))
    block[np.arange(m), perm] = 1.0 - sigma
    return block


def sinkhorn_balance(block: np.ndarray, tol: float = 1e-10, max_iter: int = 10000):
    """Balance a nonnegative block to doubly stochastic.

    Returns ``(balanced, e1, e2)`` with ``balanced = diag(e1) @ block @
    diag(e2)``.  The scaling gauge is fixed so both vectors have the same
    geometric mean.  Raises SinkhornDivergenceError when the block lacks
    total support (scalings blow up or normalization stalls).
    """
    a = np.asarray(block, dtype=float)
    m = a.shape[0]
    if a.shape != (m, m):
        raise ValueError("sinkhorn_balance needs a square block")
    if np.any(a < 0.0):
        raise ValueError("sinkhorn_balance needs a nonnegative block")
    if m == 0:
        return a.copy(), np.ones(0), np.ones(0)
    if np.any(~a.any(axis=1)) or np.any(~a.any(axis=0)):
        raise SinkhornDivergenceError("no total support: zero row or column")

    e1 = np.ones(m)
    e2 = np.ones(m)
    b = a.copy()
    for _ in range(max_iter):
        r = b.sum(axis=1)
        e1 /= r
        b = a * np.outer(e1, e2)
        c = b.sum(axis=0)
        e2 /= c
        b = a * np.outer(e1, e2)
        if max(np.abs(e1).max(), np.abs(e2).max()) > 1e12:
            raise SinkhornDivergenceError("no total support: scalings diverge")
        dev = max(np.abs(b.sum(axis=1) - 1.0).max(), np.abs(b.sum(axis=0) - 1.0).max())
        if dev < tol:
            break
    else:
        if dev > 1e-6:
            raise SinkhornDivergenceError(
                f"no total support: deviation {dev:.3g} after {max_iter} iterations"
            )
    # Gauge: equal geometric means.
    g1 = np.exp(np.mean(np.log(e1)))
    g2 = np.exp(np.mean(np.log(e2)))
    scale = np.sqrt(g2 / g1)
    return b, e1 * scale, e2 / scale


def _polar_orthogonal(signed: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix via the polar factor U V^T (batched)."""
    u, _, vt = np.linalg.svd(signed)
    return u @ vt


def _canonical_sign_patterns(m: int) -> np.ndarray:
    """All sign patterns with +1 first row and column (one per flip class)."""
    free = (m - 1) * (m - 1)
    patterns = np.ones((1 << free, m, m))
    bits = (np.arange(1 << free)[:, None] >> np.arange(free)) & 1
    patterns[:, 1:, 1:] = np.where(bits.reshape(-1, m - 1, m - 1), -1.0, 1.0)
    return patterns


def _restart_signs(target_root: np.ndarray, perm: np.ndarray, n_random: int, seed: int):
    """Initial sign patterns: structured plus a few seeded random draws."""
    m = len(perm)
    if m <= 3:
        return _canonical_sign_patterns(m)
    eye_mask = np.zeros((m, m))
    eye_mask[np.arange(m), perm] = 1.0
    inits = [
        np.where(eye_mask > 0, -1.0, 1.0),   # householder-like signs
        np.ones((m, m)),
        np.where(eye_mask > 0, 1.0, -1.0),
    ]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4, m)))
    for _ in range(n_random):
        inits.append(np.where(rng.random((m, m)) < 0.5, -1.0, 1.0))
    return np.stack(inits)


def closest_unilossless(target: np.ndarray, max_iter: int = 500,
                        n_random_restarts: int = 3, seed: int = 0):
    """Orthogonal matrix whose magnitudes best match ``sqrt(target)``.

    Alternates (a) polar projection of the signed magnitude target onto the
    orthogonal group and (b) re-signing the magnitudes with the current
    projection's signs, until the sign pattern stabilizes.  The alternation
    runs from several initial sign patterns (for blocks up to 3x3, one per
    sign-flip equivalence class, which makes the search exhaustive) and the
    best candidate seen anywhere is returned along with its residual
    ``||abs(B) - sqrt(target)||_F``.
    """
    t_root = np.sqrt(np.maximum(np.asarray(target, dtype=float), 0.0))
    m = t_root.shape[0]
    if m == 1:
        return np.ones((1, 1)), abs(1.0 - float(t_root[0, 0]))
    perm = specular_permutation(np.asarray(target, dtype=float))
    signs = _restart_signs(t_root, perm, n_random_restarts, seed)

    best_b, best_res = None, np.inf
    for _ in range(max_iter):
        b = _polar_orthogonal(signs * t_root)
        res = np.linalg.norm(np.abs(b) - t_root, axis=(1, 2))
        k = int(np.argmin(res))
        if res[k] < best_res:
            best_res = float(res[k])
            best_b = b[k].copy()
        new_signs = np.where(b >= 0.0, 1.0, -1.0)
        if np.array_equal(new_signs, signs):
            break
        signs = new_signs
    return best_b, best_res


@dataclass
class FeedbackBlock:
    patch: int
    matrix: np.ndarray            # orthogonal, rows=incoming, cols=outgoing
    perm: np.ndarray
    design: str
    residual: float               # || |B| - sqrt(energy target) ||_F
    orthogonality_error: float    # || B^T B - I ||_max
    comp_in: np.ndarray = None    # sinkhorn row compensation 1/sqrt(e1)
    comp_out: np.ndarray = None   # sinkhorn column compensation 1/sqrt(e2)


@dataclass
class FeedbackMatrix:
    design: str
    blocks: list

    def max_orthogonality_error(self) -> float:
        return max((b.orthogonality_error for b in self.blocks), default=0.0)


def _orth_error(b: np.ndarray) -> float:
    m = b.shape[0]
    return float(np.abs(b.T @ b - np.eye(m)).max()) if m else 0.0


def assemble_feedback(kernel, patches, design: str, seed: int = 0) -> FeedbackMatrix:
    """Build per-patch orthogonal blocks from the kernel with a given design."""
    if design not in DESIGNS:
        raise ValueError(f"unknown design '{design}' (choose from {DESIGNS})")
    blocks = []
    for patch_id, energy in enumerate(kernel.blocks):
        m = energy.shape[0]
        if m == 0:
            blocks.append(
                FeedbackBlock(patch_id, np.zeros((0, 0)), np.zeros(0, dtype=int),
                              design, 0.0, 0.0)
            )
            continue
        perm = specular_permutation(energy)
        comp_in = comp_out = None
        if design == "householder":
            b = householder_block(perm)
            residual = float(np.linalg.norm(np.abs(b) - np.sqrt(energy)))
        elif design == "uniform":
            sigma = patches.material(patch_id).scattering
            target = uniform_block(perm, sigma)
            b, residual = closest_unilossless(target, seed=seed)
        else:
            try:
                balanced, e1, e2 = sinkhorn_balance(energy)
            except SinkhornDivergenceError as exc:
                raise SinkhornDivergenceError(f"patch {patch_id}: {exc}") from None
            b, residual = closest_unilossless(balanced, seed=seed)
            comp_in = 1.0 / np.sqrt(e1)
            comp_out = 1.0 / np.sqrt(e2)
        blocks.append(
            FeedbackBlock(
                patch=patch_id, matrix=b, perm=perm, design=design,
                residual=residual, orthogonality_error=_orth_error(b),
                comp_in=comp_in, comp_out=comp_out,
            )
        )
    return FeedbackMatrix(design=design, blocks=blocks)


def matrix_report_csv(feedback: FeedbackMatrix, kernel, path) -> None:
    """Per-block design report, consumed by the validate CLI command."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("patch,design,size,residual,orthogonality_error\n")
        for blk in feedback.blocks:
            fh.write(
                f"{blk.patch},{blk.design},{blk.matrix.shape[0]},"
                f"{blk.residual!r},{blk.orthogonality_error!r}\n"
            )
