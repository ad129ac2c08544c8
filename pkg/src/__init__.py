# SGL - Small-Group Learning differentiable architecture search
