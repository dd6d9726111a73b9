"""streamlb: tick-coherent UDP load balancing for streamed event data.

Senders fragment tagged events into datagrams, a software data plane
redirects every fragment of one event to the same compute node through
epoch-versioned slot tables, and a control plane rebalances the tables
from receiver queue feedback without disturbing in-flight events.
"""

__version__ = "0.1.0"
