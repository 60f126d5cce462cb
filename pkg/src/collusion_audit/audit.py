"""Four-phase audit protocol: attestation, sampled verification, the
coalition policy-cap check, and epsilon issuance.

The attestation backend is *transparent*: witnesses disclose the window
seed, the query vector, and the opened index embeddings so the verifier
can re-execute the retrieval bit-exactly. This simulates a trusted
verifier running the ZK relation; it deliberately does NOT provide
cryptographic hiding (the hidden-seed semantics survives only as an
API-surface boundary). The Appendix-style cost model reports what a
Groth16 instantiation of the same relation would cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting, estimator as est_mod, ledger as ledger_mod
from .encoding import hash_fields, sha256
from .harness import (
    NoiseSeedRecord,
    TenantIndex,
    derive_noise_block,
    embedding_digest,
    topk_retrieve,
)
from .ledger import (
    CommitmentBundle,
    MerkleLedger,
    QueryRecord,
    Receipt,
    commit_phase_a,
    issue_receipt,
    prove_extension,
    record_core_digest,
    verify_extension,
    verify_receipt,
)

__all__ = [
    "AttestationBlob",
    "VerificationPlan",
    "AuditVerdict",
    "ZkCostEstimate",
    "AuditService",
    "attest_query",
    "verify_record",
    "sample_plan",
    "run_audit",
    "zk_cost",
    "query_vector_digest",
    "topk_output_digest",
    "CLAIMS",
]

CLAIMS = (
    "embedder_consistency",
    "noise_derivation",
    "noise_then_select",
    "tenant_containment",
)


def query_vector_digest(query: np.ndarray) -> bytes:
    return sha256(np.asarray(query, dtype=">f8").tobytes())


def topk_output_digest(positions, doc_ids) -> bytes:
    fields = ["topk"]
    for p in positions:
        fields.append(int(p))
    fields.extend(doc_ids)
    return hash_fields(*fields)


@dataclass(frozen=True)
class AttestationBlob:
    """Witness for the four per-query claims (verifier-only surface)."""

    claims: tuple = CLAIMS
    backend: str = "transparent"
    # transparent-backend witness payload
    embedder_digest: bytes = b""
    window_seed: bytes = b""
    sigma: float = 0.0
    core_digest: bytes = b""
    query_vector: np.ndarray | None = None
    opened_embeddings: np.ndarray | None = None  # full index, in order
    opened_tenant_id: str = ""
    claimed_noise: np.ndarray | None = None

    def __post_init__(self):
        if set(CLAIMS) - set(self.claims):
            raise ValueError("conforming records must attest all four claims")


@dataclass(frozen=True)
class VerificationPlan:
    mode: str                  # "full" | "sampled"
    s: int = 0
    beta: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        if self.mode not in ("full", "sampled"):
            raise ValueError("mode must be full or sampled")
        if self.mode == "sampled":
            if not (0 < self.beta <= 1 and 0 < self.eta < 1):
                raise ValueError("beta in (0, 1] and eta in (0, 1) required")
            if self.s < math.ceil(math.log(1.0 / self.eta) / self.beta):
                raise ValueError("sample size below the detection guarantee")


@dataclass
class AuditVerdict:
    status: str                # PASS | FAIL
    delta_policy: float
    k_max: int
    checks: dict = field(default_factory=dict)   # check name -> "ok" | witness str
    eps_audit_headline: float | None = None      # present iff PASS
    eps_audit_full: float | None = None
    sampled: dict | None = None                  # {s, beta, eta} in sampled mode
    witnesses: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "status": self.status,
            "eps_audit_headline": self.eps_audit_headline,
            "eps_audit_full": self.eps_audit_full,
            "delta_policy": self.delta_policy,
            "k_max": self.k_max,
            "checks": dict(self.checks),
            "sampled": self.sampled,
            "witnesses": list(self.witnesses),
        }


def sample_plan(beta: float, eta: float) -> VerificationPlan:
    """s = ceil(ln(1/eta)/beta) uniformly sampled records detect any
    beta-fraction violation except with probability eta."""
    if not 0.0 < beta <= 1.0 or not 0.0 < eta < 1.0:
        raise ValueError("beta in (0,1], eta in (0,1) required")
    s = math.ceil(math.log(1.0 / eta) / beta)
    return VerificationPlan(mode="sampled", s=s, beta=beta, eta=eta)


class AuditService:
    """Provider-side state for one audit window: policy, committed seed,
    per-tenant indices, the ledger, and the receipt signing key.

    ``misbehavior`` switches on adversarial-provider variants used by the
    test battery (e.g. ``select_then_noise``, ``wrong_sigma``).
    """

    def __init__(self, policy, indices, window_seed: bytes,
                 embedder_digest: bytes = None, signing_seed: bytes = b"\x01" * 32,
                 misbehavior: str | None = None):
        self.policy = policy
        self.indices = {ix.tenant_id: ix for ix in indices}
        self.window_seed = window_seed
        self.embedder_digest = embedder_digest or hash_fields("embedder", "unit-v1")
        self.signing_key, self.public_key = ledger_mod.generate_test_keypair(signing_seed)
        self.ledger = MerkleLedger()
        self.commitments = commit_phase_a(
            policy, self.embedder_digest, indices, window_seed, published_at=0
        )
        self.misbehavior = misbehavior
        self._clock = 0

    def next_timestamp(self) -> int:
        self._clock += 1
        return self._clock


def attest_query(service: AuditService, query: np.ndarray, account_id: str,
                 tenant_id: str, K: int = 5) -> tuple[QueryRecord, Receipt]:
    """Serve one query: retrieve with committed-seed noise, append the
    attested record, and issue a signed receipt."""
    index = service.indices[tenant_id]
    ts = service.next_timestamp()
    q_digest = query_vector_digest(query)
    core = record_core_digest(account_id, tenant_id, q_digest, ts)
    sigma = service.policy.sigma
    if service.misbehavior == "wrong_sigma":
        sigma = sigma * 0.5
    noise_rec = NoiseSeedRecord(service.window_seed, core, sigma)
    if service.misbehavior == "select_then_noise":
        # broken ordering: select on clean scores, noise the winners only
        clean = topk_retrieve(index, query, K, 0.0, noise_rec)
        out = clean
    else:
        out = topk_retrieve(index, query, K, sigma, noise_rec)

    opened = index.embeddings
    opened_tenant = tenant_id
    if service.misbehavior == "cross_tenant_opening":
        other = next(t for t in service.indices if t != tenant_id)
        foreign = service.indices[other].embeddings[0]
        opened = np.vstack([foreign[None, :], index.embeddings[1:]])
    emb_digest = service.embedder_digest
    if service.misbehavior == "wrong_embedder_digest":
        emb_digest = sha256(b"rogue embedder")

    noise = derive_noise_block(service.window_seed, core, len(index), sigma)
    blob = AttestationBlob(
        embedder_digest=emb_digest,
        window_seed=service.window_seed,
        sigma=sigma,
        core_digest=core,
        query_vector=np.asarray(query, dtype=np.float64),
        opened_embeddings=opened,
        opened_tenant_id=opened_tenant,
        claimed_noise=noise,
    )
    record = QueryRecord(
        account_id=account_id, tenant_id=tenant_id, query_digest=q_digest,
        topk_digest=topk_output_digest(out.topk_positions, out.topk_doc_ids),
        timestamp=ts, attestation=blob,
    )
    root, pos = service.ledger.append(record)
    receipt = issue_receipt(record, pos, root, service.signing_key)
    if service.misbehavior == "drop_receipted_record":
        # provider rewrites history: rebuild the ledger without this record
        rebuilt = MerkleLedger()
        for rec in service.ledger.records[:-1]:
            rebuilt.append(rec)
        service.ledger = rebuilt
    return record, receipt


def verify_record(record: QueryRecord, commitments: CommitmentBundle,
                  policy, backend: str = "transparent", K: int = 5) -> dict:
    """Re-execute one record's four claims against the commitments.

    Returns claim -> "ok" or a short witness string.
    """
    if backend != "transparent":
        raise ValueError("only the transparent backend is implemented")
    blob: AttestationBlob = record.attestation
    result = {}

    # A1: embedder consistency
    result["embedder_consistency"] = (
        "ok" if blob.embedder_digest == commitments.c_emb
        else "embedder digest differs from c_emb"
    )

    # A2: noise derived from the committed seed at the policy sigma
    core = record_core_digest(record.account_id, record.tenant_id,
                              record.query_digest, record.timestamp)
    if sha256(blob.window_seed) != commitments.c_seed:
        result["noise_derivation"] = "witness seed inconsistent with c_seed"
    elif not math.isclose(blob.sigma, policy.sigma, rel_tol=1e-12):
        result["noise_derivation"] = "witness sigma differs from committed policy"
    elif ledger_mod.policy_commitment(policy) != commitments.c_policy:
        result["noise_derivation"] = "policy does not match c_policy"
    else:
        expected_noise = derive_noise_block(
            blob.window_seed, core, len(blob.claimed_noise), policy.sigma
        )
        result["noise_derivation"] = (
            "ok" if blob.claimed_noise is not None
            and np.array_equal(expected_noise, blob.claimed_noise)
            else "claimed noise does not re-derive from committed seed"
        )

    # A4: openings all come from this tenant's committed index
    leaf_digests = [embedding_digest(v) for v in blob.opened_embeddings]
    root = ledger_mod.merkle_root([ledger_mod._leaf_hash(d) for d in leaf_digests])
    committed = commitments.c_idx.get(record.tenant_id)
    result["tenant_containment"] = (
        "ok" if committed is not None and root == committed
        and blob.opened_tenant_id == record.tenant_id
        else "opened embeddings do not match the tenant's committed root"
    )

    # A3: noise-then-select re-execution reproduces the published top-K
    if result["noise_derivation"] == "ok" and result["tenant_containment"] == "ok":
        opened_index = TenantIndex(record.tenant_id, blob.opened_embeddings)
        noise_rec = NoiseSeedRecord(blob.window_seed, core, policy.sigma)
        redo = topk_retrieve(opened_index, blob.query_vector, K, policy.sigma, noise_rec)
        digest = topk_output_digest(redo.topk_positions, redo.topk_doc_ids)
        result["noise_then_select"] = (
            "ok" if digest == record.topk_digest
            else "re-executed noise-then-select top-K differs from ledger digest"
        )
    else:
        result["noise_then_select"] = "not evaluated: prerequisite claim failed"
    return result


def _fail(verdict: AuditVerdict, check: str, witness: str) -> AuditVerdict:
    verdict.status = "FAIL"
    verdict.checks[check] = witness
    verdict.witnesses.append({"check": check, "witness": witness})
    return verdict


def run_audit(ledger: MerkleLedger, commitments: CommitmentBundle, policy,
              receipts: list, estimator_params: est_mod.EstimatorParams,
              plan: VerificationPlan, seed: int = 0, K: int = 5,
              published_root: bytes | None = None) -> AuditVerdict:
    """Phase D verification: commitments, per-record claims (full or
    sampled), ledger extension plus receipt consistency, the coalition
    policy-cap check, then epsilon issuance. Stops at the first witnessed
    violation.

    ``receipts`` is a list of (Receipt, issuer public key) pairs submitted
    by accounts; ``published_root`` is the root the provider advertises
    (defaults to the recomputed ledger root).
    """
    verdict = AuditVerdict(status="PASS", delta_policy=policy.delta_policy,
                           k_max=policy.k_max)
    if plan.mode == "sampled":
        verdict.sampled = {"s": plan.s, "beta": plan.beta, "eta": plan.eta}

    # step 1: commitment integrity
    if ledger_mod.policy_commitment(policy) != commitments.c_policy:
        return _fail(verdict, "commitment_integrity", "policy digest mismatch")
    if ledger.records and commitments.published_at >= ledger.records[0].timestamp:
        return _fail(verdict, "commitment_integrity",
                     "commitments published after window opened")
    verdict.checks["commitment_integrity"] = "ok"

    # step 2: per-record claim verification
    n = len(ledger)
    if plan.mode == "full" or plan.s >= n:
        positions = range(n)
    else:
        rng = np.random.default_rng(seed)
        positions = sorted(rng.choice(n, size=plan.s, replace=False).tolist())
    for pos in positions:
        claims = verify_record(ledger.records[pos], commitments, policy, K=K)
        for claim, status in claims.items():
            if status != "ok" and not status.startswith("not evaluated"):
                return _fail(verdict, claim, f"record {pos}: {status}")
    verdict.checks["record_claims"] = "ok"

    # step 3: append-only extension from c_ledger_0 and receipt consistency
    root = ledger.root if published_root is None else published_root
    try:
        proof = prove_extension(commitments.c_ledger_0, root, ledger)
        extended = verify_extension(commitments.c_ledger_0, root, proof)
    except ValueError:
        extended = False
    if not extended or root != ledger.root:
        return _fail(verdict, "ledger_extension",
                     "published root is not an append-only extension of c_ledger_0")
    verdict.checks["ledger_extension"] = "ok"
    for receipt, pk in receipts:
        check = verify_receipt(receipt, pk, ledger)
        if not check.consistent:
            return _fail(verdict, "receipt_consistency",
                         f"{check.status}: {check.detail}")
    verdict.checks["receipt_consistency"] = "ok"

    # step 4: coalition estimate and policy cap
    queries = []
    for rec in ledger.records:
        blob: AttestationBlob = rec.attestation
        if blob is not None and blob.query_vector is not None:
            queries.append((rec.account_id, blob.query_vector, rec.timestamp))
    est = est_mod.estimate(queries, estimator_params)
    cert = est_mod.certify(queries, estimator_params, est, ledger.root)
    if not est_mod.verify_certificate(ledger.root, estimator_params, est, queries):
        return _fail(verdict, "coalition_certificate", "estimator replay mismatch")
    if est.largest_cluster_accounts > policy.k_max:
        return _fail(verdict, "policy_cap",
                     f"cluster of {est.largest_cluster_accounts} accounts exceeds "
                     f"k_max={policy.k_max}")
    verdict.checks["policy_cap"] = "ok"
    verdict.checks["coalition_certificate"] = cert.hex()

    # step 5: epsilon issuance — depends only on the declared policy cap,
    # never on the empirical cluster size
    full, _ = accounting.epsilon_audit(policy)
    headline, _ = accounting.epsilon_audit(policy, headline=True)
    verdict.eps_audit_full = full
    verdict.eps_audit_headline = headline
    return verdict


# --- cost model -----------------------------------------------------------

# reference constraint counts for the two circuit styles at four index sizes
_COST_TABLE = {
    "optimized": [(1e3, 9.8e4), (1e4, 8.9e5), (1e5, 8.8e6), (1e6, 8.8e7)],
    "naive": [(1e3, 8.7e5), (1e4, 8.6e6), (1e5, 8.6e7), (1e6, 8.6e8)],
}


def _fit_linear(points):
    N = np.array([p[0] for p in points])
    c = np.array([p[1] for p in points])
    X = np.column_stack([np.ones_like(N), N])
    (base, slope), *_ = np.linalg.lstsq(X, c, rcond=None)
    return float(base), float(slope)


_COST_FIT = {mode: _fit_linear(pts) for mode, pts in _COST_TABLE.items()}


@dataclass(frozen=True)
class ZkCostEstimate:
    mode: str
    index_size: int
    constraints: float
    prove_seconds: float
    setup_seconds: float
    verify_ms: float
    sumcheck_field_ops: int  # O(d log N) verifier-side field operations


def zk_cost(mode: str, N: int, d: int = 384, K: int = 5) -> ZkCostEstimate:
    """Groth16-style cost extrapolation: constraints = base + per_doc * N
    (least-squares fit to the reference table), proving at ~1 us per
    constraint, trusted setup at half the proving time, verification a
    constant ~8 ms plus a d*log2(N) sumcheck term reported but not timed."""
    if mode not in _COST_FIT:
        raise ValueError(f"unknown mode {mode!r}")
    if N < 1:
        raise ValueError("N must be >= 1")
    base, per_doc = _COST_FIT[mode]
    constraints = base + per_doc * N
    prove = constraints * 1e-6
    return ZkCostEstimate(
        mode=mode, index_size=N, constraints=constraints,
        prove_seconds=prove, setup_seconds=prove / 2.0, verify_ms=8.0,
        sumcheck_field_ops=int(d * math.ceil(math.log2(max(N, 2)))),
    )
