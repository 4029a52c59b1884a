from dataclasses import replace

import numpy as np
import pytest
from scipy import sparse

from patchverb.absorption import air_attenuation_db_per_m, air_band_gains
from patchverb.geometry import discretize, load_scene
from patchverb.kernel import compute_kernel, enumerate_paths
from patchverb.network import (NetworkError, air_absorption_filter,
                               build_network, default_length,
                               fit_linear_phase_fir, render)
from patchverb.tracing import detection_gather


@pytest.fixture(scope="module")
def hallway_net(hallway_scene, hallway_coarse):
    patches, paths, kern = hallway_coarse
    return build_network(hallway_scene, patches, paths, kern,
                         design="householder", K=1, seed=0, n_rays=20000)


def _bypass_only(net):
    return replace(net, injectors=[])


def test_bypass_prefix_is_exact(hallway_net):
    net = hallway_net
    D = net.delay_ops.delays
    det = net.detectors
    starts = []
    for inj in net.injectors:
        if det.gains[inj.line] <= 0:
            continue
        fir = inj.fir if inj.fir.ndim == 1 else inj.fir[:, 3]
        first = int(np.flatnonzero(fir)[0])
        starts.append(inj.offset + first + int(D[inj.line]) + int(det.delays[inj.line]))
    n_first = min(starts)

    full = render(net, length=n_first + 400).samples
    bypass = render(_bypass_only(net), length=n_first + 400).samples
    assert np.array_equal(full[:n_first], bypass[:n_first])
    assert not np.array_equal(full[n_first:], bypass[n_first:])


def test_bypass_taps_are_attenuated_images(hallway_net):
    net = hallway_net
    out = render(_bypass_only(net), length=800).samples
    d = float(np.linalg.norm(net.scene.receiver - net.scene.source))
    att = air_attenuation_db_per_m()[3]
    assert out[679] == pytest.approx(10.0 ** (-att * d / 20.0) / d, rel=1e-12)
    assert np.count_nonzero(out) == len(np.unique(net.bypass_delays[net.bypass_delays < 800]))


def test_superposition(hallway_net):
    n = 12000
    full = render(hallway_net, length=n).samples
    tail = render(hallway_net, length=n, include_bypass=False).samples
    early = render(_bypass_only(hallway_net), length=n).samples
    np.testing.assert_allclose(full, tail + early, atol=1e-12)


def test_zero_mix_reduces_to_single_pass(hallway_net):
    """With the feedback mix removed, the output is exactly the sum of
    injector -> line delay -> detector convolutions."""
    net = replace(hallway_net, mix=sparse.csr_matrix(hallway_net.mix.shape))
    n = 12000
    got = render(net, length=n, include_bypass=False).samples

    D = net.delay_ops.delays
    g = net.delay_ops.gains
    det = net.detectors
    want = np.zeros(n + 4096)
    for inj in net.injectors:
        l = inj.line
        if det.gains[l] <= 0:
            continue
        fir = inj.fir if inj.fir.ndim == 1 else inj.fir[:, 3]
        base = inj.offset + int(D[l]) + int(det.delays[l])
        idx = base + np.arange(len(fir))
        ok = idx < len(want)
        np.add.at(want, idx[ok], fir[ok] * g[l] * det.gains[l])
    np.testing.assert_allclose(got, want[:n], atol=1e-12)


def test_mix_matches_block_scatter(hallway_net, hallway_coarse):
    _, paths, kern = hallway_coarse
    m = len(paths)
    dense = np.zeros((m, m))
    for blk in hallway_net.feedback.blocks:
        out_l = kern.out_lines[blk.patch]
        in_l = kern.in_lines[blk.patch]
        dense[np.ix_(out_l, in_l)] = blk.matrix.T
    assert np.array_equal(hallway_net.mix.toarray(), dense)


def test_line_gains_follow_materials(scenes_dir, hallway_scene):
    scene = load_scene(scenes_dir / "uneven.json")
    patches = discretize(scene, 4.0)
    paths = enumerate_paths(patches, scene)
    kern = compute_kernel(patches, paths)
    net = build_network(scene, patches, paths, kern, design="householder",
                        K=0, n_rays=2000, air=False)
    start_mat = [patches.material(i).broadband_reflection()
                 for i in paths.lines[:, 0]]
    np.testing.assert_allclose(net.delay_ops.gains, np.sqrt(start_mat), rtol=1e-12)
    assert len(set(np.round(net.delay_ops.gains, 12))) >= 3  # mixed materials


def test_lossless_mode(hallway_scene, hallway_coarse):
    patches, paths, kern = hallway_coarse
    net = build_network(hallway_scene, patches, paths, kern,
                        design="uniform", K=1, n_rays=5000, lossless=True)
    assert np.all(net.delay_ops.gains == 1.0)
    assert np.all(net.bypass_amps == 0.0)
    out = render(net, length=48000).samples
    assert np.all(np.isfinite(out))
    # unit-gain loop around orthogonal blocks: energy neither dies nor blows up
    head = float(np.sum(out[8000:16000] ** 2))
    tail = float(np.sum(out[40000:48000] ** 2))
    assert tail > 0.2 * head
    assert tail < 5.0 * head


def test_fd_and_lossless_are_exclusive(hallway_scene, hallway_coarse):
    patches, paths, kern = hallway_coarse
    with pytest.raises(NetworkError, match="mutually exclusive"):
        build_network(hallway_scene, patches, paths, kern, fd=True,
                      lossless=True, n_rays=1000)


def test_fd_render(hallway_scene, hallway_coarse):
    patches, paths, kern = hallway_coarse
    net = build_network(hallway_scene, patches, paths, kern,
                        design="householder", K=1, n_rays=5000, fd=True)
    assert net.delay_ops.gains is None
    assert net.delay_ops.firs.shape == (len(paths), 8)
    # linear phase: every per-line fir is symmetric
    np.testing.assert_allclose(net.delay_ops.firs, net.delay_ops.firs[:, ::-1],
                               atol=1e-15)
    out = render(net, length=24000).samples
    assert np.all(np.isfinite(out)) and np.any(out != 0.0)


def test_spread_detector_render(hallway_scene, hallway_coarse, hallway_net):
    patches, paths, _ = hallway_coarse
    bank = detection_gather(hallway_scene, patches, paths, spread=True, seed=0)
    net = replace(hallway_net, detectors=bank)
    out = render(net, length=12000, include_bypass=False).samples
    assert np.all(np.isfinite(out)) and np.any(out != 0.0)


def test_instability_guard(hallway_scene, hallway_coarse):
    patches, paths, kern = hallway_coarse
    net = build_network(hallway_scene, patches, paths, kern,
                        design="householder", K=1, n_rays=5000, lossless=True)
    net.delay_ops.gains = net.delay_ops.gains * 1.25
    with pytest.raises(NetworkError, match="instability detected"):
        render(net, length=96000)


def test_default_length_tracks_decay(hallway_scene):
    from patchverb.geometry import eyring_t60
    n = default_length(hallway_scene, 48000)
    assert n == int(round(2.0 * eyring_t60(hallway_scene) * 48000))


def test_render_rejects_empty(hallway_net):
    with pytest.raises(ValueError):
        render(hallway_net, length=0)


# ---------------------------------------------------------------------------
# air absorption


def test_air_filter_scalar():
    assert air_absorption_filter(0.0) == 1.0
    g10, g100 = air_absorption_filter(10.0), air_absorption_filter(100.0)
    assert 0.0 < g100 < g10 < 1.0
    # classical still-air model: about half a dB per 100 m at 1 kHz
    db100 = -20.0 * np.log10(g100)
    assert db100 == pytest.approx(0.5, rel=0.1)
    with pytest.raises(ValueError):
        air_absorption_filter(-1.0)


def test_air_attenuation_grows_with_frequency():
    att = air_attenuation_db_per_m()
    assert att.shape == (8,)
    assert np.all(np.diff(att) > 0)


def test_air_fir_fit():
    gains = air_band_gains(50.0)
    fir = fit_linear_phase_fir(gains, 48000, n_taps=8)
    assert fir.shape == (8,)
    np.testing.assert_allclose(fir, fir[::-1], atol=1e-15)
    w = 2.0 * np.pi * np.asarray([125, 250, 500, 1000, 2000, 4000, 8000, 16000]) / 48000
    resp = np.abs(np.exp(-1j * np.outer(w, np.arange(8))) @ fir)
    assert np.max(np.abs(resp - gains)) < 0.05
