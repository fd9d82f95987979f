"""key=value configuration files shared by nodes and the command line."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from ..ledger import AuthoritySet


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_key_values(path) -> dict[str, str]:
    return parse_key_values(Path(path).read_text())


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


@dataclass
class NodeConfig:
    node_id: str = "node0"
    listen: str = "127.0.0.1:7700"
    peers: tuple[str, ...] = ()
    # index into the authority set; None for a non-sealing archive node
    sealer_index: int | None = None
    authority_count: int = 1
    authority_seed: str = "0"
    seal_interval: float = 15.0
    data_dir: str | None = None
    max_block_records: int = 1000

    def __post_init__(self):
        if not self.seal_interval > 0:
            raise ValueError("seal_interval must be positive")
        if self.authority_count < 1:
            raise ValueError("authority_count must be at least 1")
        if self.sealer_index is not None and not 0 <= self.sealer_index < self.authority_count:
            raise ValueError(f"sealer_index {self.sealer_index} outside the authority set")
        if self.max_block_records < 1:
            raise ValueError("max_block_records must be positive")
        self.peers = tuple(self.peers)

    @property
    def seal_interval_ms(self) -> int:
        return max(1, round(self.seal_interval * 1000))

    def authorities(self) -> AuthoritySet:
        return AuthoritySet.generate(self.authority_count, self.authority_seed)

    @classmethod
    def from_mapping(cls, values: dict) -> NodeConfig:
        """Build from string values; keys that are not node settings are ignored."""
        kw = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.name == "peers":
                kw[f.name] = tuple(p.strip() for p in str(raw).split(",") if p.strip())
            elif f.name in ("sealer_index", "data_dir") and str(raw).lower() in ("", "none"):
                kw[f.name] = None
            elif f.name in ("sealer_index", "authority_count", "max_block_records"):
                kw[f.name] = int(raw)
            elif f.name == "seal_interval":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = str(raw)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> NodeConfig:
        return cls.from_mapping(load_key_values(path))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "peers":
                v = ",".join(v)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"
