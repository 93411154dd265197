"""Tokenization and attention rollout on a single image.

Walks one synthetic image through the conv stem and patch embedding, shows the
token grid that results, and renders the cls-token attention rollout as an
ASCII heat map. Run as:  python3 demos/01_tokens_and_attention.py
"""
import numpy as np

from mgreid.backbone import BackboneConfig
from mgreid.data import SyntheticSpec, generate_synthetic
from mgreid.evalkit import attention_rollout
from mgreid.heads import HeadConfig
from mgreid.model import MultiGrainModel

SHADES = " .:-=+*#%@"


def ascii_map(grid: np.ndarray) -> str:
    rows = []
    for row in grid:
        rows.append("".join(SHADES[min(int(v * (len(SHADES) - 1) + 0.5), len(SHADES) - 1)]
                            for v in row))
    return "\n".join(rows)


def main() -> None:
    dataset = generate_synthetic(SyntheticSpec(num_ids=2, num_cameras=2,
                                               images_per_id_per_camera=2, seed=7))
    path = dataset.manifest.split("query")[0].path
    image = np.asarray(dataset.images[path], dtype=np.float64)[None] / 255.0
    camera = np.array([dataset.manifest.split("query")[0].camera_id])

    cfg = BackboneConfig()  # 64x32 input, 16-px patches, embedding width 64
    model = MultiGrainModel(cfg, HeadConfig(), seed=0)

    print(f"input image:        {image.shape[1:]} (H x W x RGB), camera {camera[0]}")
    print(f"stem output:        {cfg.image_height // 2}x{cfg.image_width // 2}x"
          f"{cfg.stem_channels} (stride-2 conv, split-half instance/batch norm)")
    print(f"token grid:         {cfg.grid_rows}x{cfg.grid_cols} patches of "
          f"{cfg.patch_size}px (stem halves resolution, so each patch pools "
          f"{cfg.patch_size // 2}x{cfg.patch_size // 2} stem pixels)")

    seq = model.backbone.tokenize(image, camera, train=False)
    print(f"token sequence:     {seq.tokens.shape} = [batch, cls + "
          f"{cfg.num_patches} locals, dim]")
    print(f"camera term:        weight {cfg.camera_weight} x learned per-camera "
          "vector, added to every token")

    model.forward(image, camera)  # populates per-layer attention maps
    attentions = model.rollout_attentions()
    print(f"\nattention stack:    {len(attentions)} layers of "
          f"{attentions[0].shape} = [batch, heads, tokens, tokens]")

    result = attention_rollout(attentions, cfg.grid_rows, cfg.grid_cols)
    print("rollout:            0.5*attention + 0.5*identity per layer, rows "
          "renormalized, left-multiplied;")
    print("                    cls row over local tokens becomes the heat map")
    print(f"row-stochastic:     max |row sum - 1| = "
          f"{max(float(np.abs(m.sum(axis=1) - 1).max()) for m in result.matrices):.2e}")
    print(f"degenerate:         {result.degenerate}\n")
    print(f"cls attention over the {cfg.grid_rows}x{cfg.grid_cols} grid "
          "(darker = more mass):")
    print(ascii_map(result.heat))


if __name__ == "__main__":
    main()
