"""Exercise the ncfr_py extension end to end.

Build first:
    cargo build --release -p ncfr-py --features extension-module
    cp target/release/libncfr_py.so python/ncfr_py.so
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ncfr_py  # noqa: E402


def main():
    data, truth = ncfr_py.generate(p=4, q=6, k_true=3, n=60, seed=7)
    assert (data.p, data.q, data.n) == (4, 6, 60)
    assert len(truth["s"]) == 3 and len(truth["s"][0]) == 60

    sampler = ncfr_py.Sampler(data, k_init=4, seed=1)
    ks = sampler.sweep(200)
    assert len(ks) == 200 and all(k >= 0 for k in ks)
    state = sampler.state
    assert math.isfinite(state.log_likelihood(data))

    y_hat = state.predict(data.x)
    err = ncfr_py.nlse(y_hat, data.y)
    assert len(err) == 6 and all(math.isfinite(e) for e in err)

    r = ncfr_py.fit_frr(data)
    assert len(r) == 6 and len(r[0]) == 4

    # The same seed reproduces the chain exactly.
    again = ncfr_py.Sampler(data, k_init=4, seed=1)
    assert again.sweep(200) == ks

    try:
        ncfr_py.Dataset([[1.0, 2.0]], [[1.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched column counts must raise")

    print(f"ok: final K {state.k}, alpha {state.alpha:.3f}, median NLSE {sorted(err)[3]:.3f}")


if __name__ == "__main__":
    main()
