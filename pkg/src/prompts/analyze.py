from mcp.server.fastmcp import FastMCP


def register_prompts(mcp: FastMCP) -> None:
    @mcp.prompt(title="LocateFault")
    def locate_fault(configuration: str = "default") -> str:
        return (
            f"请先调用 validate_feeder 检查 {configuration} 配置的馈线拓扑，"
            "再用 build_graph 构建 measured-only 图并核对节点与边，"
            "用 fault_signature 预览候选故障位置的电压跌落分布，"
            "最后用 evaluate_checkpoint 在测试集上评估已训练模型并报告宏 F1。"
        )
