"""Mock MCP servers, a scripted agent, and the scenario harness."""
