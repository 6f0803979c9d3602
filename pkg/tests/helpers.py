import numpy as np

from esrm.data import REAL, LabeledDataset, Provenance, Sample


def make_samples(labels, size=4, channels=3, synthetic=(), seed=0, id_offset=0):
    rng = np.random.default_rng(seed)
    out = []
    for i, y in enumerate(labels):
        prov = Provenance.synthetic("gen") if i in synthetic else REAL
        img = rng.random((size, size, channels)).astype(np.float32)
        out.append(Sample(id=id_offset + i, image=img, label=int(y), provenance=prov))
    return out


def make_dataset(n_classes, per_class, size=4, seed=0, provenance=REAL, id_offset=0, name="toy"):
    rng = np.random.default_rng(seed)
    samples = []
    for c in range(n_classes):
        for _ in range(per_class):
            img = rng.random((size, size, 3)).astype(np.float32)
            samples.append(Sample(id=id_offset + len(samples), image=img, label=c, provenance=provenance))
    return LabeledDataset(tuple(samples), n_classes, name=name)
