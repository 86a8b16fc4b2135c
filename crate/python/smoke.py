"""Smoke test for the qprecode_py extension module.

Build and run from the repository root:

    cargo build --release -p qprecode-py --features extension-module
    cp target/release/libqprecode_py.so python/qprecode_py.so
    python3 python/smoke.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import qprecode_py as qp  # noqa: E402


def main():
    q = qp.Quantizer(1)
    assert abs(q.levels[1] - math.sqrt(2 / math.pi)) < 1e-6, q.levels
    assert abs(q.msqe() - (1 - 2 / math.pi)) < 1e-8

    h = qp.rayleigh_channel(16, 2, 7)
    w = qp.precoder("zf", h, 16.0)
    # H^T W is diagonal for zero-forcing.
    off = sum(h[m][0] * w[m][1] for m in range(16))
    assert abs(off) < 1e-9, off

    rate, nmse = qp.linear_eval("mrt", qp.rayleigh_channel(32, 1, 1), 1, 20.0)
    assert 1.5 < rate < 3.0 and -7 < nmse < -4, (rate, nmse)

    ds = qp.ChannelDataset.generate("rayleigh", 4, 1, 3, 5)
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "ch.bin")
        ds.save(p)
        back = qp.ChannelDataset.load(p)
        assert len(back) == 3 and back.channel(2) == ds.channel(2)

        net = qp.Gnn(4, 1, 1, 8, 1, seed=3)
        p_re, p_im = net.probabilities(ds.channel(0), [0.7 - 0.7j])
        assert all(abs(sum(r) - 1) < 1e-9 for r in p_re + p_im)
        y = net.infer(ds.channel(0), [0.7 - 0.7j])
        assert len(y) == 4
        ck = os.path.join(d, "net.qpgn")
        net.save(ck)
        assert qp.Gnn.load(ck).infer(ds.channel(0), [0.7 - 0.7j]) == y

        out = os.path.join(d, "power.csv")
        manifest = json.loads(qp.run_config(
            "scenario = power\nmode = baseband\nbits = 1\nm = 32\nk = 1\n"
            f"d_h = 128\nn_h = 4\nbandwidth_list_hz = 1.001e6\nout = {out}\n"))
        assert manifest["rows"] == 1

    f = qp.gnn_flops(32, 1, 128, 4, 1)
    assert f["total"] == 22_512_384, f
    dacs, gnn, total, _ = qp.power("baseband", 32, 1, 1, 1.001e6, 128, 4)
    assert abs(total * 1e3 - 33.796) / 33.796 < 1e-3, total
    print("python smoke test passed")


if __name__ == "__main__":
    main()
