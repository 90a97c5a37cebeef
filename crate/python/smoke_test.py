"""Smoke test for the Python bindings.

Build first:  pip install --no-build-isolation ./crates/py   (needs maturin)
"""

import json
import tempfile
from pathlib import Path

import ssibridge

QEAA = "https://qeaa-provider.example"


def main():
    fed = ssibridge.Federation(seed=7)
    platform = ssibridge.Platform(seed=7)
    chain = ssibridge.Chain()
    measurement = ssibridge.Platform.verifier_measurement()
    contract = chain.deploy_verifier(platform.root_fingerprint(), measurement)

    cred = fed.issue_demo(QEAA, "did:example:holder")
    assert "given_name" in cred.disclosable_names()

    wallet = ssibridge.Wallet("did:example:holder")
    cred_id = wallet.import_credential(cred)
    wallet.attest(cred, fed, platform)
    event = json.loads(wallet.publish(cred_id, chain, contract))
    assert event["credential_digest"] == cred.digest()

    pkg = wallet.present(cred_id, ["given_name"])
    verdict = json.loads(ssibridge.rp_verify(pkg, chain, platform.root_fingerprint(), measurement))
    assert verdict["verdict"] == "accept", verdict
    assert verdict["claims"]["given_name"] == "Ada"

    late = ssibridge.SCENARIO_START + 8 * 86400
    stale = json.loads(ssibridge.rp_verify(pkg, chain, platform.root_fingerprint(), measurement, now=late))
    assert stale["reason"] == "stale", stale

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "chain.jsonl"
        chain.save(str(path))
        assert ssibridge.Chain.load(str(path)).height() == chain.height()

    fed.revoke(f"{QEAA}#qeaa-provider")
    runs = platform.runs()
    try:
        wallet.attest(fed.issue_demo(QEAA, "did:example:other", seed=8), fed, platform)
        raise AssertionError("revoked issuer attested")
    except ssibridge.SsibridgeError as e:
        assert str(e).startswith("PreflightFailed"), e
    assert platform.runs() == runs

    report = json.loads(ssibridge.run_scenario("fig4", seed=7))
    assert all(c["pass"] for c in report["checks"]), report

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
