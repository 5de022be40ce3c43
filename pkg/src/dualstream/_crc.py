"""CRC-32 (IEEE 802.3 / zlib polynomial).

ISA-L computes the same checksum as zlib several times faster, which matters
for multi-megabyte composite payloads.
"""

try:
    from isal.isal_zlib import crc32
except ImportError:  # pragma: no cover - exercised only without isal
    from zlib import crc32

__all__ = ["crc32"]
