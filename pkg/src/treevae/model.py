"""Tree-bound container for every parameterized function of the model."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import nets
from .config import ArchConfig, _build
from .topology import TreeTopology, grow_at, prune

ROUTER_EPS = 1e-7


class ConfigMismatch(ValueError):
    pass


class NotGrown(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    def __init__(self, field: str, reason: str = ""):
        super().__init__(f"corrupt checkpoint field {field!r}" + (f": {reason}" if reason else ""))
        self.field = field


_NODE_BANKS = ("heads", "trans_p", "trans_q", "routers_p", "routers_q", "decoders")


class TreeModel(nn.Module):
    """All functions of a tree-structured VAE, keyed by node id.

    ``router_override`` maps a node to a fixed right-branch probability that
    replaces both routers at that node. Values of exactly 0 or 1 bypass
    clamping, which is how single-path configurations are expressed.
    """

    def __init__(self, topology: TreeTopology, arch: ArchConfig, seed: int = 0):
        super().__init__()
        if arch.input_shape is None or arch.likelihood is None:
            raise ConfigMismatch("arch.input_shape and arch.likelihood must be resolved before building a model")
        if topology.height > arch.max_depth or not arch.covers_depth(topology.height):
            raise ConfigMismatch(
                f"latent dims {arch.latent_dims!r} / max depth {arch.max_depth} "
                f"do not cover a tree of height {topology.height}"
            )
        self.arch = arch
        self.topology = topology
        self.router_override: dict[int, float] = {}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build_shared()
            for bank in _NODE_BANKS:
                setattr(self, bank, nn.ModuleDict())
            self._sync_functions()
        if arch.dtype == "float64":
            self.double()

    # -- construction ----------------------------------------------------

    @property
    def input_shape(self) -> tuple:
        return tuple(self.arch.input_shape)

    def d_dim(self, depth: int) -> int:
        return self.arch.encoder_out if depth == self.arch.max_depth else self.arch.bottom_up_dim

    def _build_shared(self):
        a = self.arch
        if a.encoder == "mlp":
            self.encoder = nets.MLPEncoder(a.input_shape, a.encoder_hidden, a.encoder_out)
        elif a.encoder == "conv":
            self.encoder = nets.ConvEncoder(a.input_shape, a.conv_channels, a.encoder_out)
        elif a.encoder == "omniglot":
            self.encoder = nets.ConvEncoder(a.input_shape, a.conv_channels, a.encoder_out, kernel=4, depth_mult=2)
        else:
            self.encoder = nets.ResnetEncoder(a.input_shape, a.encoder_out)
        self.ladder = nn.ModuleList(
            nets.LadderBlock(self.d_dim(h + 1), self.d_dim(h)) for h in range(a.max_depth)
        )
        if a.contrastive:
            self.projections = nn.ModuleList(
                nets.ProjectionHead(self.d_dim(h), a.projection_hidden, a.projection_dim)
                for h in range(a.max_depth + 1)
            )
        else:
            self.projections = nn.ModuleList()

    def _make(self, bank: str, node: int) -> nn.Module:
        a, t = self.arch, self.topology
        h = t.depth[node]
        if bank == "heads":
            return nets.GaussianHead(self.d_dim(h), a.latent_dim(h))
        if bank in ("trans_p", "trans_q"):
            return nets.Transformation(a.latent_dim(h - 1), a.hidden, a.latent_dim(h))
        if bank == "routers_p":
            return nets.Router(a.latent_dim(h), a.hidden)
        if bank == "routers_q":
            return nets.Router(self.d_dim(h), a.hidden)
        if a.encoder in ("conv", "omniglot"):
            return nets.ConvDecoder(a.latent_dim(h), [4 * c for c in a.conv_channels]
                                    if a.encoder == "omniglot" else a.conv_channels, a.input_shape)
        if a.encoder == "resnet":
            return nets.ResnetDecoder(a.latent_dim(h), a.input_shape)
        return nets.MLPDecoder(a.latent_dim(h), a.encoder_hidden, a.input_shape)

    def _expected_sig(self, bank: str, node: int) -> tuple:
        a, h = self.arch, self.topology.depth[node]
        return {
            "heads": lambda: (self.d_dim(h), a.latent_dim(h)),
            "trans_p": lambda: (a.latent_dim(h - 1), a.latent_dim(h)),
            "trans_q": lambda: (a.latent_dim(h - 1), a.latent_dim(h)),
            "routers_p": lambda: (a.latent_dim(h), 1),
            "routers_q": lambda: (self.d_dim(h), 1),
            "decoders": lambda: (a.latent_dim(h), int(np.prod(a.input_shape))),
        }[bank]()

    def _owners(self, bank: str) -> list[int]:
        t = self.topology
        non_root = [n for n in sorted(t.nodes) if n != t.root]
        return {
            "heads": sorted(t.nodes),
            "trans_p": non_root,
            "trans_q": non_root if self.arch.separate_posterior_transform else [],
            "routers_p": t.internal,
            "routers_q": t.internal,
            "decoders": t.sorted_leaves,
        }[bank]

    def _sync_functions(self) -> list[str]:
        """Create missing functions, rebuild ones whose shapes no longer fit, drop orphans."""
        created = []
        for bank in _NODE_BANKS:
            mods = getattr(self, bank)
            owners = self._owners(bank)
            for key in [k for k in mods if int(k) not in owners]:
                del mods[key]
            for node in owners:
                key = str(node)
                if key in mods and mods[key].sig == self._expected_sig(bank, node):
                    continue
                mods[key] = self._make(bank, node)
                created.append(f"{bank}.{key}")
        if self.arch.dtype == "float64":
            self.double()
        return created

    def grow(self, leaf: int, seed: int) -> "TreeModel":
        self.topology = grow_at(self.topology, leaf)
        return attach_subtree_functions(self, leaf, seed)

    def prune(self, node: int, seed: int) -> list[str]:
        self.topology = prune(self.topology, node)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            created = self._sync_functions()
        for key in created:
            bank, n = key.split(".")
            for p in getattr(self, bank)[n].parameters():
                p.requires_grad_(True)
        return created

    # -- ownership / freezing ---------------------------------------------

    def node_modules(self, node: int) -> list[nn.Module]:
        key = str(node)
        return [getattr(self, b)[key] for b in _NODE_BANKS if key in getattr(self, b)]

    def shared_modules(self) -> list[nn.Module]:
        return [self.encoder, self.ladder, self.projections]

    def apply_modes(self, training: bool = True) -> None:
        """Train-mode only the modules holding trainable parameters; frozen ones stay in eval."""
        self.train(training)
        if not training:
            return
        for mod in [*self.shared_modules(), *(m for n in self.topology.nodes for m in self.node_modules(n))]:
            params = list(mod.parameters())
            if params and not any(p.requires_grad for p in params):
                mod.eval()

    def router_prob(self, which: str, node: int, inp: torch.Tensor) -> torch.Tensor:
        if node in self.router_override:
            value = float(self.router_override[node])
            shape = inp.shape[:-1]
            out = torch.full(shape, value, dtype=inp.dtype, device=inp.device)
            if value in (0.0, 1.0):
                return out
            return out.clamp(ROUTER_EPS, 1 - ROUTER_EPS)
        bank = self.routers_p if which == "p" else self.routers_q
        return bank[str(node)](inp).clamp(ROUTER_EPS, 1 - ROUTER_EPS)

    def posterior_transform(self, node: int) -> nn.Module:
        if self.arch.separate_posterior_transform:
            return self.trans_q[str(node)]
        return self.trans_p[str(node)]


def build_model(topology: TreeTopology, arch: ArchConfig, seed: int = 0) -> TreeModel:
    return TreeModel(topology, arch, seed)


def attach_subtree_functions(m: TreeModel, parent_leaf: int, seed: int) -> TreeModel:
    if parent_leaf in m.topology.leaves:
        raise NotGrown(f"node {parent_leaf} is still a leaf")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        created = m._sync_functions()
    for key in created:
        bank, n = key.split(".")
        for p in getattr(m, bank)[n].parameters():
            p.requires_grad_(True)
    return m


def set_trainable(m: TreeModel, nodes, include_shared: bool, flag: bool) -> None:
    for node in nodes:
        if node not in m.topology.nodes:
            raise KeyError(f"node {node} not in topology")
        for mod in m.node_modules(node):
            for p in mod.parameters():
                p.requires_grad_(flag)
    if include_shared:
        for mod in m.shared_modules():
            for p in mod.parameters():
                p.requires_grad_(flag)


def trainable_parameters(m: TreeModel) -> list[torch.nn.Parameter]:
    return [p for p in m.parameters() if p.requires_grad]


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(m: TreeModel, path: str | Path, extra: dict | None = None) -> None:
    state = m.state_dict()
    manifest = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("topology.json", m.topology.to_json(indent=1))
        zf.writestr("arch.json", json.dumps(asdict(m.arch), indent=1))
        if extra:
            zf.writestr("extra.json", json.dumps(extra, indent=1))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy()
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            member = f"tensors/{name}.npy"
            zf.writestr(member, buf.getvalue())
            manifest[name] = {"file": member, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))


def _read(zf: zipfile.ZipFile, member: str) -> bytes:
    try:
        return zf.read(member)
    except KeyError:
        raise CorruptCheckpoint(member, "missing") from None
    except (zipfile.BadZipFile, EOFError, OSError, ValueError) as exc:
        raise CorruptCheckpoint(member, str(exc)) from None


def load_checkpoint(path: str | Path) -> TreeModel:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError, EOFError) as exc:
        raise CorruptCheckpoint("archive", str(exc)) from None
    with zf:
        try:
            topology = TreeTopology.from_json(_read(zf, "topology.json").decode())
        except CorruptCheckpoint:
            raise
        except Exception as exc:
            raise CorruptCheckpoint("topology.json", str(exc)) from None
        try:
            arch = _build(ArchConfig, json.loads(_read(zf, "arch.json")))
        except CorruptCheckpoint:
            raise
        except Exception as exc:
            raise CorruptCheckpoint("arch.json", str(exc)) from None
        try:
            manifest = json.loads(_read(zf, "manifest.json"))
        except CorruptCheckpoint:
            raise
        except Exception as exc:
            raise CorruptCheckpoint("manifest.json", str(exc)) from None
        model = TreeModel(topology, arch, seed=0)
        expected = model.state_dict()
        if set(manifest) != set(expected):
            missing = sorted(set(expected) ^ set(manifest))
            raise CorruptCheckpoint(missing[0], "parameter set does not match topology")
        loaded = {}
        for name, meta in manifest.items():
            try:
                arr = np.load(io.BytesIO(_read(zf, meta["file"])), allow_pickle=False)
            except CorruptCheckpoint:
                raise
            except Exception as exc:
                raise CorruptCheckpoint(name, str(exc)) from None
            if list(arr.shape) != list(expected[name].shape):
                raise CorruptCheckpoint(name, f"shape {arr.shape} != {tuple(expected[name].shape)}")
            loaded[name] = torch.from_numpy(arr.copy())
        model.load_state_dict(loaded)
    model.eval()
    return model


def checkpoint_extra(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        if "extra.json" not in zf.namelist():
            return {}
        return json.loads(zf.read("extra.json"))
