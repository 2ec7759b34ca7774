#!/usr/bin/env python3
"""Convert torchvision VGG-19 weights into a fuselite feature-extractor archive.

The C++ side feeds the first conv with 255*x minus a per-channel mean. The
torchvision normalisation is folded into conv1_1 so both produce the same
features away from the image border.
"""

import argparse
import json
import struct

import numpy as np

NAMES = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4", "conv5_1", "conv5_2",
]
CPP_MEAN = np.array([123.68, 116.779, 103.939])
TV_MEAN = np.array([0.485, 0.456, 0.406])
TV_STD = np.array([0.229, 0.224, 0.225])


def conv_layers(random_init: bool):
    import torch
    from torchvision.models import VGG19_Weights, vgg19

    model = vgg19(weights=None if random_init else VGG19_Weights.IMAGENET1K_V1)
    convs = [m for m in model.features if isinstance(m, torch.nn.Conv2d)]
    return [(c.weight.detach().double().numpy(), c.bias.detach().double().numpy()) for c in convs[: len(NAMES)]]


def fold_input_normalisation(w, b):
    scale = 1.0 / (255.0 * TV_STD)
    shift = (CPP_MEAN / 255.0 - TV_MEAN) / TV_STD
    w2 = w * scale[None, :, None, None]
    b2 = b + np.einsum("ocij,c->o", w, shift)
    return w2, b2


def write_archive(path, layers, meta):
    tensors, offset = [], 0
    payload = []
    for name, (w, b) in zip(NAMES, layers):
        for suffix, arr in ((".weight", w), (".bias", b.reshape(1, -1, 1, 1))):
            arr = np.ascontiguousarray(arr, dtype="<f4")
            tensors.append({"name": name + suffix, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            payload.append(arr.tobytes())
    header = {
        "kind": "feature_extractor",
        "arch_version": "fuselite-nets/1",
        "arch": {"kind": "feature_extractor", "input_size": 256, "width": 64, "depth": 7, "pretrained": True},
        "meta": meta,
        "tensors": tensors,
    }
    text = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(b"FLARCH01")
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for chunk in payload:
            f.write(chunk)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output .flarch path")
    ap.add_argument("--random-init", action="store_true", help="skip the download; for format checks only")
    args = ap.parse_args()
    layers = conv_layers(args.random_init)
    layers[0] = fold_input_normalisation(*layers[0])
    source = "random" if args.random_init else "torchvision IMAGENET1K_V1"
    write_archive(args.out, layers, {"source": source})


if __name__ == "__main__":
    main()
