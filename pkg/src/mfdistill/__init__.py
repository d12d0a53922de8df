"""Multi-frame to single-frame LiDAR detector distillation, desk scale.

Subpackages:
    geom      - points, oriented boxes, rigid transforms, rotated IoU
    autodiff  - dense f64 tensors with reverse-mode gradients
    fusion    - multi-view dense object fusion and fused-object files
    synth     - deterministic synthetic LiDAR sequence generator
    backbone  - toy voxel detector (voxelizer, encoder, RPNs, heads)
    distill   - voxel / BEV / response distillation losses
    evaluate  - desk-scale AP / APH evaluation
    config    - run configuration and presets
    train     - teacher pretraining and student distillation loops
    cli       - command-line entry point
"""

__version__ = "0.1.0"
