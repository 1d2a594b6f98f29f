"""The 10-class blob task and its trained models, cached per process."""
from functools import lru_cache

from mmclab.datasets import make_blobs
from mmclab.losses import Head, LossSpec
from mmclab.nn import MLP
from mmclab.trainer import TrainConfig, train

L, P, D = 10, 32, 10
HIDDEN = 64
SPREAD = 0.1
EPOCHS = 60


@lru_cache(maxsize=None)
def data(seed):
    tr = make_blobs(L, P, 200, SPREAD, seed=seed)
    te = make_blobs(L, P, 100, SPREAD, seed=1000 + seed, split="test")
    return tr, te


@lru_cache(maxsize=None)
def trained(kind, seed, c_mm=10.0, epochs=EPOCHS):
    """``(model, head, history)`` for one loss kind; same init and data order for every kind."""
    tr, te = data(seed)
    model = MLP([P, HIDDEN, HIDDEN, D], seed=seed)
    head = Head(LossSpec(kind, c_mm=c_mm) if kind in ("MMC", "MMLDA") else LossSpec(kind),
                L, D, seed=seed)
    history = train(model, head, tr, TrainConfig(epochs=epochs, batch_size=64, seed=seed),
                    eval_set=te)
    return model, head, history
