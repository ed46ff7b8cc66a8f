"""Golden VGG-19 activations for the forward-fidelity test.

Reads an SWTXW bundle, runs the twelve conv layers in PyTorch on two fixed
64x64 images and writes, into the fixture directory:

    image_a.png, image_b.png          8-bit RGB inputs
    image_{a,b}.{layer}.f32           activations, little-endian f32, H x W x C
    manifest.json                     bundle checksum, shapes, tool versions

Usage: python tools/reference_forward.py BUNDLE OUT_DIR
"""

import json
import struct
import sys
import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

MAGIC = b"SWTXW\x00\x00\x01"
SIZE = 64


def load_bundle(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError("not an SWTXW bundle")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    payload = data[12 + hlen : -4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ValueError("payload checksum mismatch")
    tensors = {}
    for t in header["tensors"]:
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).copy()
    return header, tensors, crc


def make_images():
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    rng = np.random.default_rng(20240611)
    # soft stripes plus noise
    a = np.stack(
        [
            0.5 + 0.4 * np.sin(x / 3.0 + y / 7.0),
            0.5 + 0.3 * np.cos(y / 5.0),
            0.4 + 0.2 * np.sin((x + y) / 4.0),
        ],
        axis=-1,
    )
    a = a + 0.08 * rng.standard_normal(a.shape)
    # blocks of random colour
    blocks = rng.uniform(0.0, 1.0, size=(SIZE // 8, SIZE // 8, 3))
    b = np.kron(blocks, np.ones((8, 8, 1)))
    b = 0.7 * b + 0.3 * rng.uniform(0.0, 1.0, size=b.shape)
    return [np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8) for img in (a, b)]


def forward(header, tensors, rgb8):
    pre = header["preprocessing"]
    x = rgb8.astype(np.float64) / 255.0 * pre["scale"] - np.array(pre["channel_means"], dtype=np.float64)
    if pre["channel_order"] == "bgr":
        x = x[..., ::-1]
    t = torch.from_numpy(x.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    mode = "reflect" if header["padding"] == "reflect" else "constant"
    outs = []
    n = len(header["layers"])
    for i, layer in enumerate(header["layers"]):
        w = torch.from_numpy(tensors[layer["name"] + ".weight"])
        b = torch.from_numpy(tensors[layer["name"] + ".bias"])
        t = F.relu(F.conv2d(F.pad(t, (1, 1, 1, 1), mode=mode), w, b))
        outs.append((layer["name"], t[0].permute(1, 2, 0).contiguous().numpy()))
        if i in header["pool_after"] and i + 1 < n:
            t = F.avg_pool2d(t, 2) if header["pool_kind"] == "average" else F.max_pool2d(t, 2)
    return outs


def main():
    bundle, out_dir = sys.argv[1], Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    header, tensors, crc = load_bundle(bundle)
    manifest = {
        "bundle_crc32": f"{crc:08x}",
        "bundle_provenance": header["provenance"],
        "torch_version": torch.__version__,
        "dtype": "f32",
        "layout": "hwc",
        "images": [],
    }
    for tag, img in zip("ab", make_images()):
        name = f"image_{tag}.png"
        Image.fromarray(img, "RGB").save(out_dir / name)
        entry = {"png": name, "layers": []}
        with torch.no_grad():
            for layer, act in forward(header, tensors, img):
                fname = f"image_{tag}.{layer}.f32"
                act.astype("<f4").tofile(out_dir / fname)
                entry["layers"].append({"name": layer, "shape": list(act.shape), "file": fname})
        manifest["images"].append(entry)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
