"""End-to-end encrypted group messaging with client-side community governance.

The package is organized in layers:

- ``crypto`` / ``canonical``: deterministic primitives and byte-exact JSON
  serialization used by everything above.
- ``messaging``: encrypted group channels with epochs, ordered commits and
  unordered application messages.
- ``governance`` / ``policies``: the replicated governance state machine
  (RBAC, policy engine, voting, reports) that rides on ordered messages.
- ``delivery`` / ``authsvc`` / ``moderation``: the platform services
  (untrusted relay+sequencer, trusted key directory, platform moderator).
- ``client``: the user-facing client tying the layers together, plus the
  ``cli``, ``control_api`` and ``bench`` front ends.
"""

__version__ = "0.1.0"
