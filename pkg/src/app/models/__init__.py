from src.app.models.attention import AttentionBlock, FeedForward, MultiHeadAttention, attention
from src.app.models.backbone import PyramidBackbone
from src.app.models.decoder import PredictionSet, TwoStageDecoder, pick_best
from src.app.models.encoder import MultiScaleEncoder
from src.app.models.pillar_net import PillarFeatureNet
from src.app.models.tracker_net import SiameseTracker
