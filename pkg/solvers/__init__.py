# 数值求解层：生成元、锥域差分、非线性期望
