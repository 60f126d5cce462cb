"""Phase A commitments and the append-only query ledger.

Merkle tree in the transparency-log style: leaves are domain-separated
with 0x00 and interior nodes with 0x01, the root of an n-leaf tree splits
at the largest power of two strictly less than n, and both inclusion
(audit path) and consistency (append-only extension) proofs are
supported. Receipts are Ed25519-signed over the canonical serialization
of their fields.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .encoding import canonical, hash_fields, sha256

__all__ = [
    "CommitmentBundle",
    "QueryRecord",
    "Receipt",
    "MerkleProof",
    "ConsistencyProof",
    "MerkleLedger",
    "merkle_root",
    "commit_phase_a",
    "prove_inclusion",
    "verify_inclusion",
    "prove_extension",
    "verify_extension",
    "issue_receipt",
    "verify_receipt",
    "generate_test_keypair",
    "policy_commitment",
    "record_digest",
    "record_core_digest",
    "save_ledger",
    "load_ledger",
]

_LEAF = b"\x00"
_NODE = b"\x01"
_EMPTY_MARKER = b"collusion-audit/empty-ledger"


def _leaf_hash(data: bytes) -> bytes:
    return sha256(_LEAF + data)


def _node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(_NODE + left + right)


def _split(n: int) -> int:
    """Largest power of two strictly less than n (n >= 2)."""
    k = 1
    while k * 2 < n:
        k *= 2
    return k


def merkle_root(leaves: list) -> bytes:
    """Root over already-hashed leaves; empty tree commits to a fixed marker."""
    if not leaves:
        return sha256(_EMPTY_MARKER)
    if len(leaves) == 1:
        return leaves[0]
    k = _split(len(leaves))
    return _node_hash(merkle_root(leaves[:k]), merkle_root(leaves[k:]))


def _audit_path(leaves: list, m: int) -> list:
    """Siblings from leaf m to the root as (hash, side) with side 'L'/'R'
    telling the verifier where the sibling sits."""
    if len(leaves) <= 1:
        return []
    k = _split(len(leaves))
    if m < k:
        return _audit_path(leaves[:k], m) + [(merkle_root(leaves[k:]), "R")]
    return _audit_path(leaves[k:], m - k) + [(merkle_root(leaves[:k]), "L")]


def _consistency(leaves: list, m: int, start: bool = True) -> list:
    """Transparency-log consistency proof between the m-leaf prefix and
    the full tree."""
    n = len(leaves)
    if m == n:
        return [] if start else [merkle_root(leaves)]
    k = _split(n)
    if m <= k:
        return _consistency(leaves[:k], m, start) + [merkle_root(leaves[k:])]
    return _consistency(leaves[k:], m - k, False) + [merkle_root(leaves[:k])]


@dataclass(frozen=True)
class MerkleProof:
    leaf_position: int
    path: tuple  # ((sibling_hash, side), ...)


@dataclass(frozen=True)
class ConsistencyProof:
    old_size: int
    new_size: int
    hashes: tuple


@dataclass(frozen=True)
class QueryRecord:
    account_id: str
    tenant_id: str
    query_digest: bytes
    topk_digest: bytes
    timestamp: int
    attestation: object = None  # AttestationBlob; opaque to the ledger

    def __post_init__(self):
        if len(self.query_digest) != 32 or len(self.topk_digest) != 32:
            raise ValueError("digests must be 32 bytes")
        if self.timestamp < 0:
            raise ValueError("timestamp must be nonnegative")


def record_core_digest(account_id: str, tenant_id: str, query_digest: bytes,
                       timestamp: int) -> bytes:
    """Digest of the pre-noise record core: this is the record digest the
    noise derivation binds to, so it cannot depend on the (noise-derived)
    top-K output."""
    return hash_fields("record-core", account_id, tenant_id, query_digest, timestamp)


def record_digest(record: QueryRecord) -> bytes:
    """Ledger leaf preimage: the full record including the top-K digest."""
    return hash_fields(
        "record", record.account_id, record.tenant_id, record.query_digest,
        record.topk_digest, record.timestamp,
    )


@dataclass(frozen=True)
class CommitmentBundle:
    c_emb: bytes
    c_idx: dict          # tenant_id -> vector-commitment root
    c_seed: bytes
    c_ledger_0: bytes
    c_policy: bytes
    published_at: int    # logical timestamp; must precede the window

    def __post_init__(self):
        for name in ("c_emb", "c_seed", "c_ledger_0", "c_policy"):
            if len(getattr(self, name)) != 32:
                raise ValueError(f"{name} must be 32 bytes")


def policy_commitment(policy) -> bytes:
    """H(eps_acc || delta_acc || sigma || k_max || delta_policy || window)
    in exactly that serialization order."""
    return hash_fields(
        policy.eps_acc, policy.delta_acc, policy.sigma, policy.k_max,
        policy.delta_policy, policy.window_id,
    )


def commit_phase_a(policy, embedder_artifact_digest: bytes, indices: list,
                   window_seed: bytes, published_at: int = 0) -> CommitmentBundle:
    """Pre-window commitments: embedder artifact, per-tenant index roots,
    hashed window seed, empty ledger root, and the policy digest."""
    if len(window_seed) != 32:
        raise ValueError("window seed must be 32 bytes")
    from .harness import index_leaf_digests  # local import avoids a cycle

    c_idx = {}
    for index in indices:
        if index.tenant_id in c_idx:
            raise ValueError(f"duplicate tenant id {index.tenant_id!r}")
        c_idx[index.tenant_id] = merkle_root(
            [_leaf_hash(d) for d in index_leaf_digests(index)]
        )
    return CommitmentBundle(
        c_emb=embedder_artifact_digest,
        c_idx=c_idx,
        c_seed=sha256(window_seed),
        c_ledger_0=merkle_root([]),
        c_policy=policy_commitment(policy),
        published_at=published_at,
    )


class MerkleLedger:
    """Append-only ledger of query records with published roots.

    Single writer; readers may take proofs against any published root
    snapshot (tree state is derived purely from the leaf list).
    """

    def __init__(self):
        self._records: list[QueryRecord] = []
        self._leaves: list[bytes] = []
        self._roots: list[bytes] = [merkle_root([])]  # root journal, index = size

    def __len__(self) -> int:
        return len(self._leaves)

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    @property
    def root(self) -> bytes:
        return self._roots[-1]

    def root_at(self, size: int) -> bytes:
        return self._roots[size]

    def leaf(self, position: int) -> bytes:
        return self._leaves[position]

    def append(self, record: QueryRecord) -> tuple[bytes, int]:
        """Append a record; returns (new_root, leaf_position)."""
        if self._records and record.timestamp <= self._records[-1].timestamp:
            raise ValueError("timestamp regression")
        self._records.append(record)
        self._leaves.append(_leaf_hash(record_digest(record)))
        self._roots.append(merkle_root(self._leaves))
        return self.root, len(self._leaves) - 1


def prove_inclusion(ledger: MerkleLedger, position: int, size: int | None = None) -> MerkleProof:
    n = len(ledger) if size is None else size
    if not 0 <= position < n:
        raise IndexError("position out of range")
    return MerkleProof(position, tuple(_audit_path(ledger._leaves[:n], position)))


def verify_inclusion(root: bytes, leaf_digest: bytes, proof: MerkleProof) -> bool:
    """True iff hashing leaf_digest up the path reconstructs root."""
    h = leaf_digest
    for sibling, side in proof.path:
        h = _node_hash(sibling, h) if side == "L" else _node_hash(h, sibling)
    return h == root


def prove_extension(old_root: bytes, new_root: bytes, ledger: MerkleLedger) -> ConsistencyProof:
    """Consistency proof that old_root is a prefix snapshot of new_root."""
    old_size = next(
        (s for s in range(len(ledger) + 1) if ledger.root_at(s) == old_root), None
    )
    new_size = next(
        (s for s in range(len(ledger) + 1) if ledger.root_at(s) == new_root), None
    )
    if old_size is None or new_size is None or old_size > new_size:
        raise ValueError("roots do not correspond to prefix snapshots")
    if old_size == 0 or old_size == new_size:
        hashes = ()
    else:
        hashes = tuple(_consistency(ledger._leaves[:new_size], old_size))
    return ConsistencyProof(old_size, new_size, hashes)


def _root_from_consistency(size: int, total: int, hashes: list,
                           old_root: bytes, start: bool = True):
    """Recompute (old_root, new_root) from a consistency proof.

    Mirrors the recursive proof generator: the proof list carries inner
    hashes first, so each level pops its own sibling off the end before
    recursing. When the prefix aligns with a subtree boundary (start base
    case) the proof omits the prefix root and the claimed old_root is
    folded into the new-root computation directly.
    """
    if size == total:
        if start:
            return old_root, old_root
        h = hashes.pop()
        return h, h
    k = _split(total)
    if size <= k:
        right = hashes.pop()
        inner = _root_from_consistency(size, k, hashes, old_root, start)
        return inner[0], _node_hash(inner[1], right)
    left = hashes.pop()
    inner = _root_from_consistency(size - k, total - k, hashes, old_root, False)
    return _node_hash(left, inner[0]), _node_hash(left, inner[1])


def verify_extension(old_root: bytes, new_root: bytes, proof: ConsistencyProof) -> bool:
    """Verifier-side check that new_root extends old_root append-only."""
    if proof.old_size == proof.new_size:
        return old_root == new_root and not proof.hashes
    if proof.old_size == 0:
        return old_root == merkle_root([]) and not proof.hashes
    if not 0 < proof.old_size < proof.new_size:
        return False
    hashes = list(proof.hashes)
    try:
        got = _root_from_consistency(proof.old_size, proof.new_size, hashes, old_root)
    except IndexError:
        return False
    return not hashes and got == (old_root, new_root)


# --- receipts -------------------------------------------------------------

@dataclass(frozen=True)
class Receipt:
    account_id: str
    query_digest: bytes
    topk_digest: bytes
    leaf_position: int
    ledger_root_at_issue: bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        return canonical(
            "receipt", self.account_id, self.query_digest, self.topk_digest,
            self.leaf_position, self.ledger_root_at_issue,
        )


@dataclass(frozen=True)
class ReceiptCheck:
    status: str          # consistent | forgery_witness | non_inclusion_witness
    detail: str = ""

    @property
    def consistent(self) -> bool:
        return self.status == "consistent"


def generate_test_keypair(seed: bytes = b"\x00" * 32):
    """Deterministic Ed25519 test keypair (NOT a production PKI)."""
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    key = Ed25519PrivateKey.from_private_bytes(seed)
    return key, key.public_key()


def issue_receipt(record: QueryRecord, position: int, root: bytes,
                  signing_key: Ed25519PrivateKey) -> Receipt:
    receipt = Receipt(
        account_id=record.account_id,
        query_digest=record.query_digest,
        topk_digest=record.topk_digest,
        leaf_position=position,
        ledger_root_at_issue=root,
        signature=b"",
    )
    sig = signing_key.sign(receipt.signed_payload())
    return Receipt(**{**receipt.__dict__, "signature": sig})


def verify_receipt(receipt: Receipt, public_key: Ed25519PublicKey,
                   ledger: MerkleLedger) -> ReceiptCheck:
    """Check signature, ledger presence, digest equality, and that the
    root at issue extends to the current root. Each failure mode is a
    named witness class, never a bare False."""
    try:
        public_key.verify(receipt.signature, receipt.signed_payload())
    except InvalidSignature:
        return ReceiptCheck("forgery_witness", "bad signature")
    pos = receipt.leaf_position
    if pos >= len(ledger):
        return ReceiptCheck("non_inclusion_witness", "position beyond ledger")
    rec = ledger.records[pos]
    if rec.query_digest != receipt.query_digest or rec.topk_digest != receipt.topk_digest:
        return ReceiptCheck("forgery_witness", "ledger record digest mismatch")
    # the root at issue must be the (pos+1)-prefix snapshot, and that
    # snapshot must extend append-only to the current root
    issue_root = ledger.root_at(pos + 1)
    if issue_root != receipt.ledger_root_at_issue:
        return ReceiptCheck("forgery_witness", "root at issue inconsistent with ledger")
    proof = prove_extension(issue_root, ledger.root, ledger)
    if not verify_extension(issue_root, ledger.root, proof):
        return ReceiptCheck("non_inclusion_witness", "issue root does not extend")
    # inclusion of the leaf under the current root
    incl = prove_inclusion(ledger, pos)
    if not verify_inclusion(ledger.root, ledger.leaf(pos), incl):
        return ReceiptCheck("non_inclusion_witness", "inclusion proof failed")
    return ReceiptCheck("consistent")


# --- persistence ----------------------------------------------------------

def save_ledger(ledger: MerkleLedger, path) -> None:
    """Length-prefixed record file plus a root journal alongside."""
    with open(path, "wb") as fh:
        for rec in ledger.records:
            blob = canonical(rec.account_id, rec.tenant_id, rec.query_digest,
                             rec.topk_digest, rec.timestamp)
            fh.write(len(blob).to_bytes(4, "big") + blob)
    with open(str(path) + ".roots", "wb") as fh:
        for i in range(len(ledger) + 1):
            fh.write(ledger.root_at(i))


def _read_field(buf: bytes, off: int) -> tuple[bytes, int]:
    ln = int.from_bytes(buf[off:off + 4], "big")
    return buf[off + 4:off + 4 + ln], off + 4 + ln


def load_ledger(path) -> MerkleLedger:
    ledger = MerkleLedger()
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0
    while off < len(data):
        blob_len = int.from_bytes(data[off:off + 4], "big")
        blob = data[off + 4:off + 4 + blob_len]
        off += 4 + blob_len
        p = 0
        account, p = _read_field(blob, p)
        tenant, p = _read_field(blob, p)
        qd, p = _read_field(blob, p)
        td, p = _read_field(blob, p)
        ts, p = _read_field(blob, p)
        ledger.append(QueryRecord(
            account_id=account.decode(), tenant_id=tenant.decode(),
            query_digest=qd, topk_digest=td,
            timestamp=int.from_bytes(ts, "big"),
        ))
    roots_path = str(path) + ".roots"
    if os.path.exists(roots_path):
        with open(roots_path, "rb") as fh:
            journal = fh.read()
        for i in range(len(ledger) + 1):
            if journal[32 * i:32 * (i + 1)] != ledger.root_at(i):
                raise ValueError("root journal does not match records")
    return ledger
