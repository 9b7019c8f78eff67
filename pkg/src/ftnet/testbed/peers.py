"""PeerSpecs for the bundled testbed programs."""

from __future__ import annotations

from ..orchestrator import PeerSpec, Role, Side

CLIENT_ENTRY = "ftnet.testbed.client:main"
SERVER_ENTRY = "ftnet.testbed.server:main"
MICRO = "ftnet.testbed.micro:"


def common_args(transport: str = "tcp", integrity: str = "crc+hmac", seed: int | None = None) -> list[str]:
    args = ["--transport", transport, "--integrity", integrity, "--host", "{host}", "--port", "{port}"]
    if seed is not None:
        args += ["--seed", str(seed)]
    return args


def tinychat_pair(transport: str = "tcp", integrity: str = "crc+hmac", seed: int | None = None,
                  arm: str = "", reply_timeout_ms: int | None = None) -> tuple[PeerSpec, PeerSpec]:
    """(weird client, target server).  ``seed=None`` means fresh nonces."""
    args = common_args(transport, integrity, seed)
    client_args = list(args)
    if reply_timeout_ms is not None:
        client_args += ["--reply-timeout-ms", str(reply_timeout_ms)]
    weird = PeerSpec(Role.WEIRD, Side.CLIENT, client_args, entry=CLIENT_ENTRY, name="tinychat-client")
    target = PeerSpec(Role.TARGET, Side.SERVER, args + (["--arm", arm] if arm else []),
                      entry=SERVER_ENTRY, name="tinychat-server")
    return weird, target


def micro_pair(loops: int = 1, crash_on: int | None = None, swapped: bool = False,
               hang: bool = False) -> tuple[PeerSpec, PeerSpec]:
    base = ["--host", "{host}", "--port", "{port}"] + (["--hang"] if hang else [])
    target_args = base + ([f"--crash-on={crash_on}"] if crash_on is not None else [])
    weird_args = base + ["--loops", str(loops)]
    if swapped:
        return (PeerSpec(Role.WEIRD, Side.SERVER, weird_args, entry=MICRO + "weird_server_main"),
                PeerSpec(Role.TARGET, Side.CLIENT, target_args, entry=MICRO + "target_client_main"))
    return (PeerSpec(Role.WEIRD, Side.CLIENT, weird_args, entry=MICRO + "weird_client_main"),
            PeerSpec(Role.TARGET, Side.SERVER, target_args, entry=MICRO + "target_server_main"))
