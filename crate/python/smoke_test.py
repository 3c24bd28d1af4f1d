"""Smoke test for the pyhemf extension.

Build and install first:  pip install --no-build-isolation -e crates/python
Then run:                 python python/smoke_test.py
"""

import math
import os
import tempfile

import pyhemf


def main():
    assert abs(pyhemf.digamma(1.0) + 0.5772156649015329) < 1e-12

    gen = pyhemf.Hyperparameters(latent_dim=3, sigma2=0.25, w0_scale=0.1, iota0=6.0)
    ratings, user_labels, item_labels = pyhemf.sample(gen, 3, 2, 80, 60, 0.15, seed=1)
    assert len(user_labels) == 80 and len(item_labels) == 60
    train, test = ratings.split("holdout", fraction=0.9, seed=2)
    assert len(train) + len(test) == len(ratings)

    hyper = pyhemf.Hyperparameters(latent_dim=3, sigma2=0.25, mode="conjugate")
    model = pyhemf.Model.fit(train, hyper, max_sweeps=30)
    trace = model.elbo_trace
    assert all(b >= a - 1e-8 * abs(a) for a, b in zip(trace, trace[1:]))
    batch_rmse = model.rmse(test)
    users, items, values = test.triples()
    assert math.isclose(pyhemf.rmse(model.predict(users, items), test), batch_rmse)

    streamer = pyhemf.Streamer(hyper, seed=3)
    tu, ti, tv = train.triples()
    for start in range(0, len(tv), 30):
        report = streamer.process(tu[start:start + 30], ti[start:start + 30], tv[start:start + 30])
        assert "spawned_users" in report
    online_rmse = streamer.rmse(test)

    sgd = pyhemf.SgdModel(latent_dim=3, seed=4)
    sgd.process(tu, ti, tv)
    mean = sum(tv) / len(tv)
    sgd_rmse = pyhemf.rmse(sgd.predict(users, items, fallback=mean), test)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = pyhemf.Model.load(path)
        assert again.predict(users, items) == model.predict(users, items)

    try:
        pyhemf.Hyperparameters(latent_dim=3, sigma2=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative sigma2 accepted")

    print(f"batch {batch_rmse:.4f}  online {online_rmse:.4f}  sgd {sgd_rmse:.4f}  "
          f"D,K {model.n_components} / {streamer.n_components}")
    print("ok")


if __name__ == "__main__":
    main()
