# Models 模块
