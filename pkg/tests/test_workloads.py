from __future__ import annotations

import struct

import numpy as np
import pytest

from permafault.isa import Instruction, MemSpace
from permafault.workloads import SENTINEL, SUITE, get_workload, list_workloads


def _run(wl, data):
    m = wl.make_machine(wl.config_for(), data)
    assert m.run().completed
    return wl.read_output(m)


def _f(bits):
    return struct.unpack("<f", struct.pack("<I", int(bits)))[0]


def test_suite_shape():
    suite = list_workloads()
    assert len(suite) >= 9
    assert sum(w.uses_shared for w in suite) >= 3
    assert sum(not w.uses_shared for w in suite) >= 3
    assert len({w.name for w in suite}) == len(suite)


@pytest.mark.parametrize("wl", SUITE, ids=lambda w: w.name)
def test_uses_shared_matches_static_scan(wl):
    shared_refs = [i for i in wl.program.instructions()
                   if isinstance(i, Instruction) and i.mem_space is MemSpace.SHARED]
    assert wl.uses_shared == bool(shared_refs)
    assert (wl.shared_bytes > 0) == wl.uses_shared


@pytest.mark.parametrize("wl", SUITE, ids=lambda w: w.name)
def test_fault_free_matches_oracle_and_is_bounded(wl, goldens):
    g = goldens[wl.name]
    assert g.dyn_instr_count < 10 ** 6
    assert np.array_equal(g.output, wl.reference_output(g.data))
    assert not (g.output == SENTINEL).all()


@pytest.mark.parametrize("wl", SUITE, ids=lambda w: w.name)
def test_inputs_reproducible(wl):
    a, b = wl.make_inputs(5), wl.make_inputs(5)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_vectoradd_elementwise():
    wl = get_workload("vectoradd")
    d = wl.make_inputs()
    out = _run(wl, d)
    for i in range(256):
        assert out[i] == (int(d["a"][i]) + int(d["b"][i])) & 0xFFFFFFFF


def test_reduction_all_ones():
    wl = get_workload("reduction")
    out = _run(wl, {"in": np.ones(1024, np.uint32)})
    assert out.tolist() == [256] * 4 and int(out.sum()) == 1024


def test_gemm_identity():
    for name in ("gemm_naive", "gemm_tiled"):
        wl = get_workload(name)
        d = wl.make_inputs()
        d["B"] = np.eye(16, dtype=np.float32).reshape(-1).view(np.uint32).copy()
        assert np.array_equal(_run(wl, d), d["A"])


def test_gemm_tiled_equals_naive():
    a, b = get_workload("gemm_naive"), get_workload("gemm_tiled")
    d = a.make_inputs(11)
    assert np.array_equal(_run(a, d), _run(b, d))


def test_gemm_oracle_against_sequential_loop():
    wl = get_workload("gemm_naive")
    d = wl.make_inputs()
    ref = wl.reference_output(d)
    A = d["A"].view(np.float32).reshape(16, 16)
    B = d["B"].view(np.float32).reshape(16, 16)
    for i, j in ((0, 0), (3, 7), (15, 15)):
        acc = 0.0
        for k in range(16):
            acc = float(np.float32(A[i, k] * np.float64(B[k, j]) + acc))
        assert _f(ref[i * 16 + j]) == acc


def test_histogram_counts():
    wl = get_workload("histogram")
    d = wl.make_inputs()
    counts = [0] * 8
    for v in d["in"]:
        counts[int(v) & 7] += 1
    assert _run(wl, d).tolist() == counts


def test_prefix_scan_per_cta():
    wl = get_workload("prefix_scan")
    d = wl.make_inputs()
    out = _run(wl, d)
    for cta in range(2):
        s = 0
        for i in range(128):
            s = (s + int(d["in"][cta * 128 + i])) & 0xFFFFFFFF
            assert out[cta * 128 + i] == s


def test_bitonic_sorts_slices():
    wl = get_workload("bitonic")
    d = wl.make_inputs()
    out = _run(wl, d).view(np.int32)
    src = d["in"].view(np.int32)
    for s in range(2):
        assert out[s * 32:(s + 1) * 32].tolist() == sorted(src[s * 32:(s + 1) * 32].tolist())


def test_loopy_iota():
    wl = get_workload("loopy_iota")
    out = _run(wl, wl.make_inputs())
    assert out.tolist() == [t * ((t & 7) + 1) for t in range(64)]


def test_aliases_and_unknown():
    assert get_workload("gemm-lite").name == "gemm_naive"
    with pytest.raises(KeyError):
        get_workload("nope")
