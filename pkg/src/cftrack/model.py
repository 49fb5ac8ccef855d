"""Full tracker network: Siamese backbone, fusion, heads, and embedder.

One seeded constructor builds every parameter deterministically.  The
``layer_table`` drives parameter and multiply-accumulate accounting for a
single template+search forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import SEARCH, TEMPLATE, Backbone, BackboneConfig, FeatureMap
from .cfm import EmbeddingModule
from .fusion import FusionModule
from .heads import HeadOutputs, PredictionHeads
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = BackboneConfig()

    def validate(self):
        self.backbone.validate()


class CFTrackModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.config.validate()
        self.seed = seed
        # Distinct deterministic streams per component.
        self.backbone = Backbone(self.config.backbone, seed)
        self.fusion = FusionModule(seed + 1)
        self.embedder = EmbeddingModule(seed + 2)
        self.heads = PredictionHeads(seed + 3)

    # -- forward pieces -------------------------------------------------------

    def extract(self, image: Tensor, role: str) -> FeatureMap:
        return self.backbone.features(image, role)

    def fuse(self, f_z: FeatureMap, f_x: FeatureMap) -> Tensor:
        return self.fusion.fuse(f_z, f_x)

    def predict(self, fused: Tensor) -> HeadOutputs:
        return self.heads(fused)

    def embed(self, features_9x9: Tensor) -> Tensor:
        return self.embedder(features_9x9)

    def forward_pair(self, template_img: Tensor, search_img: Tensor):
        """Template + search pass up to head outputs."""
        f_z = self.extract(template_img, TEMPLATE)
        f_x = self.extract(search_img, SEARCH)
        fused = self.fuse(f_z, f_x)
        return f_z, f_x, fused, self.predict(fused)

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        params.extend(self.backbone.named_parameters())
        params.extend(self.fusion.named_parameters())
        params.extend(self.embedder.named_parameters())
        params.extend(self.heads.named_parameters())
        return params

    def parameter_checksum(self) -> int:
        import zlib

        crc = 0
        for name, p in self.named_parameters():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data, dtype="<f4").tobytes(), crc)
        return crc

    def layer_table(self) -> list[dict]:
        return (
            self.backbone.layer_table()
            + self.fusion.layer_table()
            + self.embedder.layer_table()
            + self.heads.layer_table()
        )
