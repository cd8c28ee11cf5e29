"""Dataset-domain embedding, the affine fusion head and the assembled predictor."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn

from .specfeat import ShapeError, SpecFeatureExtractor, build_spec_extractor
from .sslfeat import SSLFeatureExtractor, build_ssl_extractor
from .utils import config_hash, seeded

CHECKPOINT_FORMAT = "mosfuse-checkpoint/1"


class UnseenDomainError(KeyError):
    def __str__(self) -> str:
        return f"unseen domain {self.args[0]!r}; known: {self.args[1]}"


class DomainTable(nn.Module):
    def __init__(self, vocabulary: Sequence[str], dim: int = 1):
        super().__init__()
        self.vocabulary = list(vocabulary)
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("duplicate domain tokens")
        self.dim = dim
        self.embedding = nn.Embedding(len(self.vocabulary), dim)
        self._index = {tok: i for i, tok in enumerate(self.vocabulary)}

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnseenDomainError(token, self.vocabulary) from None

    def indices(self, tokens: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.index(t) for t in tokens], dtype=torch.long)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.embedding(idx)


def domain_embed(dataset_id: str, table: DomainTable) -> torch.Tensor:
    return table(torch.tensor([table.index(dataset_id)]))[0]


@dataclass
class FeatureBundle:
    h_spec: Optional[torch.Tensor]
    h_ssl: Optional[torch.Tensor]
    h_domain: Optional[torch.Tensor]

    def concat(self) -> torch.Tensor:
        parts = [p for p in (self.h_spec, self.h_ssl, self.h_domain) if p is not None and p.shape[-1] > 0]
        if not parts:
            raise ShapeError("empty feature bundle")
        return torch.cat(parts, dim=-1)


def fuse_predict(bundle: FeatureBundle, head: nn.Linear) -> torch.Tensor:
    """``head(concat(h_spec, h_ssl, h_domain))`` squeezed to the score axis."""
    x = bundle.concat()
    if x.shape[-1] != head.in_features:
        raise ShapeError(f"bundle has {x.shape[-1]} features, head expects {head.in_features}")
    return head(x).squeeze(-1)


class MOSPredictor(nn.Module):
    """Either branch (or both) + optional domain table + one affine layer.

    Batches are dicts with ``images`` (B, K, N, F, F), ``wave`` (B, S),
    ``lengths`` (B,) and ``domain`` (B,) vocabulary indices.
    """

    def __init__(
        self,
        spec: Optional[SpecFeatureExtractor] = None,
        ssl: Optional[SSLFeatureExtractor] = None,
        vocabulary: Optional[Sequence[str]] = None,
        domain_dim: int = 1,
    ):
        super().__init__()
        if spec is None and ssl is None:
            raise ValueError("a predictor needs at least one feature branch")
        self.spec = spec
        self.ssl = ssl
        self.domain = DomainTable(vocabulary, domain_dim) if vocabulary is not None else None
        self.head = nn.Linear(self.input_dim, 1)

    @property
    def d_spec(self) -> int:
        return self.spec.out_dim if self.spec is not None else 0

    @property
    def d_ssl(self) -> int:
        return self.ssl.out_dim if self.ssl is not None else 0

    @property
    def d_dom(self) -> int:
        return self.domain.dim if self.domain is not None else 0

    @property
    def input_dim(self) -> int:
        return self.d_spec + self.d_ssl + self.d_dom

    @property
    def branches(self) -> List[str]:
        return [name for name in ("spec", "ssl") if getattr(self, name) is not None]

    def param_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups: Dict[str, List[nn.Parameter]] = {}
        if self.spec is not None:
            groups["spec_extractor"] = list(self.spec.parameters())
        if self.ssl is not None:
            groups["ssl_extractor"] = list(self.ssl.parameters())
            groups["ssl_backbone"] = list(self.ssl.encoder.parameters())
        if self.domain is not None:
            groups["domain"] = list(self.domain.parameters())
        groups["head"] = list(self.head.parameters())
        return groups

    def group_modules(self, name: str) -> List[nn.Module]:
        return {
            "spec_extractor": [self.spec],
            "ssl_extractor": [self.ssl],
            "ssl_backbone": [self.ssl.encoder if self.ssl is not None else None],
            "domain": [self.domain],
            "head": [self.head],
        }[name]

    def spec_features(self, batch, mix=None) -> Optional[torch.Tensor]:
        return self.spec(batch["images"], mix) if self.spec is not None else None

    def ssl_features(self, batch, mix=None) -> Optional[torch.Tensor]:
        return self.ssl(batch["wave"], batch.get("lengths"), mix) if self.ssl is not None else None

    def domain_features(self, domain_idx: Optional[torch.Tensor], batch_size: int, mix=None) -> Optional[torch.Tensor]:
        if self.domain is None:
            return None
        if domain_idx is None:
            raise ValueError("model uses domain encoding but no domain ids were given")
        h = self.domain(domain_idx)
        if mix is not None:
            from .objective import mix_with

            h = mix_with(h, *mix)
        return h

    def predict_from_features(self, h_spec, h_ssl, domain_idx, mix=None) -> torch.Tensor:
        ref = h_spec if h_spec is not None else h_ssl
        h_dom = self.domain_features(domain_idx, ref.shape[0], mix)
        return fuse_predict(FeatureBundle(h_spec, h_ssl, h_dom), self.head)

    def forward(self, batch, mix=None) -> torch.Tensor:
        return self.predict_from_features(
            self.spec_features(batch, mix), self.ssl_features(batch, mix), batch.get("domain"), mix
        )

    def domain_indices(self, token: str, batch_size: int) -> Optional[torch.Tensor]:
        if self.domain is None:
            return None
        return torch.full((batch_size,), self.domain.index(token), dtype=torch.long)


def predict_domain_average(model: MOSPredictor, batch, domains: Sequence[str]) -> torch.Tensor:
    """Mean prediction over several seen domains; features are computed once."""
    if not domains:
        raise ValueError("empty domain list")
    if model.domain is None:
        raise ValueError("model was built without domain encoding")
    h_spec = model.spec_features(batch)
    h_ssl = model.ssl_features(batch)
    ref = h_spec if h_spec is not None else h_ssl
    preds = [model.predict_from_features(h_spec, h_ssl, model.domain_indices(d, ref.shape[0])) for d in domains]
    return torch.stack(preds).mean(dim=0)


def build_model(
    cfg,
    vocabulary: Optional[Sequence[str]],
    branches: Sequence[str] = ("spec", "ssl"),
    seed: int = 0,
    spec: Optional[SpecFeatureExtractor] = None,
    ssl: Optional[SSLFeatureExtractor] = None,
) -> MOSPredictor:
    """Fresh predictor from a RunConfig; pass ``spec``/``ssl`` to reuse trained extractors."""
    if "spec" in branches and spec is None:
        spec = build_spec_extractor(cfg.model.spec, cfg.audio.windows, seed=seed * 7 + 1)
    if "ssl" in branches and ssl is None:
        ssl = build_ssl_extractor(cfg.model.ssl, seed=seed * 7 + 2)
    vocab = list(vocabulary) if (cfg.model.domain_encoding and vocabulary is not None) else None
    with seeded(seed * 7 + 3):
        model = MOSPredictor(
            spec if "spec" in branches else None,
            ssl if "ssl" in branches else None,
            vocab,
            cfg.model.domain_dim,
        )
    if cfg.model.head_bias_init is not None:
        with torch.no_grad():
            model.head.bias.fill_(cfg.model.head_bias_init)
    return model


def save_checkpoint(model: MOSPredictor, path: Union[str, Path], cfg, extra: Optional[dict] = None) -> None:
    snapshot = cfg.snapshot()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": snapshot,
        "config_hash": config_hash(snapshot),
        "branches": model.branches,
        "vocabulary": model.domain.vocabulary if model.domain is not None else None,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, str(path))


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path: Union[str, Path]):
    """Returns ``(model, config, payload)``; the model is in eval mode."""
    from .config import RunConfig

    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    cfg = RunConfig.model_validate(payload["config"])
    # Structure only; weights come from the state dict (no pretrained download).
    build_cfg = copy.deepcopy(cfg)
    build_cfg.model.spec.checkpoints = None
    build_cfg.model.ssl.checkpoint = None
    if build_cfg.model.ssl.type == "wav2vec2" and cfg.model.ssl.checkpoint:
        build_cfg.model.ssl.checkpoint = cfg.model.ssl.checkpoint
    model = build_model(build_cfg, payload["vocabulary"], payload["branches"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload
