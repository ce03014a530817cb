from .datasets import LabelledSet, load_dataset, load_mnist, read_idx, synthetic_blobs
