"""Where the parameters and multiply-accumulates of the tiny CNN go.

Run: python3 demos/01_model_budget.py
"""

from cardiofuse.model import ModelConfig, build_cnn, build_mlp, count_flops, count_params

cnn = build_cnn(ModelConfig(), seed=0)

# every parameter tensor, grouped by top-level layer
per_block = {}
for name, layer, key in cnn.parameters():
    top = name.split(".")[0]
    per_block[top] = per_block.get(top, 0) + layer.params[key].size
for top, n in per_block.items():
    print(f"{top:12s} {n:6d}")
print(f"{'total':12s} {count_params(cnn):6d}")

# MACs per conv/linear layer; the elementwise ops (BN, activations, adds) are tracked separately
fc = count_flops(cnn)
print()
for name, macs in fc.per_layer.items():
    print(f"{name:28s} {macs:8d} MACs")
print(f"conv+linear: {fc.macs} MACs = {fc.conv_linear} FLOPs, elementwise: {fc.elementwise}")

# the expansion-heavy last block dominates
heaviest = max(fc.per_layer, key=fc.per_layer.get)
print(f"largest single layer: {heaviest} ({fc.per_layer[heaviest] / fc.macs:.0%} of MACs)")

# longer windows only change the stem, so the cost grows slowly with input length
print()
for n in (64, 128, 1024, 6000):
    m = build_cnn(ModelConfig.variant(n))
    print(f"CNN {n:5d}: {count_params(m):6d} params, {count_flops(m).conv_linear / 1e6:.2f}M FLOPs")

mlp = build_mlp(seed=0)
print(f"MLP      : {count_params(mlp):6d} params, {count_flops(mlp).conv_linear / 1e6:.3f}M FLOPs")
