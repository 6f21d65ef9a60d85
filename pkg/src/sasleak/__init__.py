"""Static detection of cache side-channel leaks in a three-address IR.

The pipeline is: parse (:mod:`sasleak.ir`), interpret abstractly in the
secret-augmented symbolic domain (:mod:`sasleak.domain`,
:mod:`sasleak.absint`), then decide each flagged site with bitvector
constraints (:mod:`sasleak.checker`).  :mod:`sasleak.oracle` runs programs
concretely with security labels to cross-check the analysis.
"""

__version__ = "0.1.0"
