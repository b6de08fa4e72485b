"""adaptparse - 跨域人体解析的对抗式特征补偿与结构化标签适配"""

__version__ = "0.1.0"
