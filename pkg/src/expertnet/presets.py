"""Built-in network configurations.

CANONICAL_TEXT is the full 128x128 reference network; DESK_TEXT is the
scaled-down profile (32x32 input, 8/16/24/32 channel ladder, two exfeat
blocks) that keeps training and verification runs in the minutes range
on a CPU.  The same texts ship as configs/*.cfg for CLI use.
"""

from .model import parse_config

CANONICAL_TEXT = """\
# Reference configuration: 128x128x3 input, 7 expression classes.
input c=3 h=128 w=128
conv name=Conv1 k=5 out=32 stride=1 act=relu
conv name=Conv2 k=3 out=32 stride=2 act=relu
exfeat name=ExFeat1
add name=Add1 skip=Conv2
conv name=Conv4 k=3 out=64 stride=2 act=relu
exfeat name=ExFeat2
add name=Add2 skip=Conv4
conv name=Conv5 k=3 out=96 stride=2 act=relu
exfeat name=ExFeat3
add name=Add3 skip=Conv5
conv name=Conv7 k=3 out=128 stride=2 act=relu
exfeat name=ExFeat4
add name=Add4 skip=Conv7
conv name=Conv9 k=3 out=184 stride=2 act=relu
conv name=Conv10 k=3 out=256 stride=2 act=relu
fc name=FC1 out=512 act=relu
fc name=FC2 out=1024 act=relu
classifier name=Classifier classes=7
"""

DESK_TEXT = """\
# Desk profile: small enough to train in minutes on one CPU core.
input c=3 h=32 w=32
conv name=Conv1 k=5 out=8 stride=1 act=relu
conv name=Conv2 k=3 out=8 stride=2 act=relu
exfeat name=ExFeat1
add name=Add1 skip=Conv2
conv name=Conv3 k=3 out=16 stride=2 act=relu
exfeat name=ExFeat2
add name=Add2 skip=Conv3
conv name=Conv4 k=3 out=24 stride=2 act=relu
conv name=Conv5 k=3 out=32 stride=2 act=relu
fc name=FC1 out=64 act=relu
classifier name=Classifier classes=4
"""


def canonical_config():
    return parse_config(CANONICAL_TEXT)


def desk_config(num_classes=None):
    config = parse_config(DESK_TEXT)
    if num_classes is not None:
        config.layers[-1].out = num_classes
        config.num_classes = num_classes
    return config
