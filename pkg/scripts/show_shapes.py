"""Print the layer plan for the full-size configuration next to the reference table."""
from tversky3d import unet


def main():
    plan = {layer.name: layer for layer in unet.plan_shapes(unet.PAPER_CONFIG)}
    for name, shape_in, shape_out in unet.PAPER_TABLE:
        layer = plan[name]
        ok = (layer.input_shape, layer.output_shape) == (shape_in, shape_out)
        print(f"{name:<4} {layer.kind:<5} {str(layer.input_shape):<22} -> {str(layer.output_shape):<22} "
              f"{'ok' if ok else 'MISMATCH'}")
    params = unet.init_params(unet.NetConfig(levels=4, base_features=16, input_shape=(16, 16, 16)))
    print(f"parameters at base 16, 4 levels: {params.n_parameters():,}")


if __name__ == "__main__":
    main()
