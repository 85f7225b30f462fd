"""coplay: leader-based shared playback of recorded courseware.

A group registry hands out group membership and arbitrates leadership by
compare-and-set; peers keep a star topology around the current leader and
replicate a small versioned playback state; every session-visible action
lands in an append-only checksummed event log; a deterministic simulation
harness replays whole sessions, seed by seed, for the test suite.
"""

__version__ = "0.1.0"
