"""
parsegrid: C-DLinkNet による人物パーシング（学習・評価・推論・アブレーション）
"""
