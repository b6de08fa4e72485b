# Commands 模块：每个子命令一个文件，register() 注册参数，run() 执行
