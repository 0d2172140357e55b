# Tests package for CANet Restoration CLI
