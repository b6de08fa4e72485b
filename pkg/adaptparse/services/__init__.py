# Services 模块
